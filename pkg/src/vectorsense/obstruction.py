"""Opaque obstacles, their transmission masks, and piecewise-linear trajectories.

An obstacle covers a region A of the transverse plane; the field behind it is
``(1 - 1_A) E``. On a grid the indicator becomes a per-pixel coverage fraction:
exact pixel-area fractions for straight edges, 4x4 supersampling for disks.
Masking multiplies amplitudes by ``sqrt(1 - coverage)`` so that transmitted
intensity is linear in coverage.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError, RangeError

SUPERSAMPLE = 4
_SUB = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5


@dataclass(frozen=True)
class Disk:
    diameter: float

    def __post_init__(self):
        if not self.diameter > 0:
            raise ConfigurationError("disk diameter must be positive")


@dataclass(frozen=True)
class Bar:
    """Infinite opaque strip of the given width through the pose centre, along angle theta."""

    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ConfigurationError("bar width must be positive")


@dataclass(frozen=True)
class HalfPlane:
    """Everything on the side of the edge that the unit normal ``(cos theta, sin theta)`` points to."""


Shape = Disk | Bar | HalfPlane


@dataclass(frozen=True)
class Pose:
    x0: float = 0.0
    y0: float = 0.0
    theta: float = 0.0

    def rotated(self, angle):
        """Pose rotated by ``angle`` about the beam axis."""
        c, s = math.cos(angle), math.sin(angle)
        return Pose(c * self.x0 - s * self.y0, s * self.x0 + c * self.y0, self.theta + angle)


@dataclass(frozen=True)
class Obstacle:
    shape: Shape
    pose: Pose = field(default_factory=Pose)
    diffraction_scale: float = 1.35
    complement: bool = False

    def __post_init__(self):
        if not 1.0 <= self.diffraction_scale <= 2.0:
            raise ConfigurationError(
                f"diffraction_scale must lie in [1, 2], got {self.diffraction_scale}")

    def at(self, pose):
        return replace(self, pose=pose)

    def complemented(self):
        """The complementary aperture (Babinet partner)."""
        return replace(self, complement=not self.complement)

    @property
    def effective_diameter(self):
        if not isinstance(self.shape, Disk):
            raise AttributeError("only disks have a diameter")
        return self.shape.diameter * self.diffraction_scale

    def contains(self, x, y):
        """Boolean mask of points inside the covered region (vectorised)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        px = x - self.pose.x0
        py = y - self.pose.y0
        shape = self.shape
        if isinstance(shape, Disk):
            r = 0.5 * self.effective_diameter
            inside = px * px + py * py <= r * r
        elif isinstance(shape, Bar):
            c, s = math.cos(self.pose.theta), math.sin(self.pose.theta)
            inside = np.abs(-px * s + py * c) <= 0.5 * shape.width
        elif isinstance(shape, HalfPlane):
            c, s = math.cos(self.pose.theta), math.sin(self.pose.theta)
            inside = px * c + py * s >= 0.0
        else:
            raise ConfigurationError(f"unsupported shape {shape!r}")
        return ~inside if self.complement else inside


def indicator(obstacle, point):
    """1 if ``point = (x, y)`` lies in the covered region, else 0."""
    return int(bool(obstacle.contains(point[0], point[1])))


def _bbox(obstacle, geometry):
    """Pixel slices enclosing the covered region, or ``None`` for the full grid."""
    if obstacle.complement or not isinstance(obstacle.shape, Disk):
        return None
    r = 0.5 * obstacle.effective_diameter
    x, y = geometry.x, geometry.y
    ix0 = np.searchsorted(x, obstacle.pose.x0 - r - geometry.dx)
    ix1 = np.searchsorted(x, obstacle.pose.x0 + r + geometry.dx, side="right")
    iy0 = np.searchsorted(y, obstacle.pose.y0 - r - geometry.dy)
    iy1 = np.searchsorted(y, obstacle.pose.y0 + r + geometry.dy, side="right")
    return slice(iy0, iy1), slice(ix0, ix1)


def _halfplane_fraction(signed, ax, by):
    """Area fraction of pixels with ``n . (p - p_c) + signed >= 0``.

    ``signed`` is the signed distance of each pixel centre from the edge and
    ``ax = |n_x| dx / 2``, ``by = |n_y| dy / 2``. The projection of a uniform pixel onto
    the normal is the convolution of two box densities, so the covered fraction is a
    second difference of the ramp-squared function.
    """
    if min(ax, by) <= 1e-12 * max(ax, by):
        half = max(ax, by)
        return np.clip((signed + half) / (2.0 * half), 0.0, 1.0)

    def g(u):
        return 0.5 * np.maximum(u, 0.0) ** 2

    return np.clip((g(signed + ax + by) - g(signed + ax - by) - g(signed - ax + by)
                    + g(signed - ax - by)) / (4.0 * ax * by), 0.0, 1.0)


def _edge_coverage(obstacle, geometry, xs, ys):
    c, s = math.cos(obstacle.pose.theta), math.sin(obstacle.pose.theta)
    px = xs[None, :] - obstacle.pose.x0
    py = ys[:, None] - obstacle.pose.y0
    if isinstance(obstacle.shape, HalfPlane):
        ax, by = abs(c) * geometry.dx / 2, abs(s) * geometry.dy / 2
        return _halfplane_fraction(px * c + py * s, ax, by)
    # Bar: strip |n . p| <= width/2 with n the normal to the bar direction.
    ax, by = abs(s) * geometry.dx / 2, abs(c) * geometry.dy / 2
    dist = -px * s + py * c
    half = 0.5 * obstacle.shape.width
    return np.clip(_halfplane_fraction(dist + half, ax, by)
                   - _halfplane_fraction(dist - half, ax, by), 0.0, 1.0)


def coverage_window(obstacle, geometry):
    """Fractional coverage restricted to the obstacle's bounding box.

    Returns ``(rows, cols, frac)`` where ``frac`` has the shape of
    ``geometry.mesh[0][rows, cols]``; pixels outside the window are uncovered.
    Straight edges (half-planes, bars) use the exact pixel-area fraction; disks use
    4x4 supersampling.
    """
    box = _bbox(obstacle, geometry)
    if box is None:
        rows, cols = slice(0, geometry.ny), slice(0, geometry.nx)
    else:
        rows, cols = box
    xs = geometry.x[cols]
    ys = geometry.y[rows]
    if xs.size == 0 or ys.size == 0:
        return rows, cols, np.zeros((ys.size, xs.size))
    if isinstance(obstacle.shape, (HalfPlane, Bar)):
        frac = _edge_coverage(obstacle, geometry, xs, ys)
    else:
        sub_x = xs[None, :] + geometry.dx * _SUB[:, None]
        sub_y = ys[None, :] + geometry.dy * _SUB[:, None]
        plain = replace(obstacle, complement=False)
        frac = np.zeros((ys.size, xs.size))
        for sy in sub_y:
            for sx in sub_x:
                frac += plain.contains(sx[None, :], sy[:, None])
        frac /= SUPERSAMPLE * SUPERSAMPLE
    if obstacle.complement:
        frac = 1.0 - frac
    return rows, cols, frac


def coverage(obstacle, geometry):
    """Per-pixel covered fraction in [0, 1] on the full grid; ``None`` obstacle covers nothing."""
    out = np.zeros(geometry.shape)
    if obstacle is None:
        return out
    rows, cols, frac = coverage_window(obstacle, geometry)
    out[rows, cols] = frac
    return out


def apply(obstacle, field_):
    """Field directly behind ``obstacle``: amplitudes scaled by ``sqrt(1 - coverage)``."""
    if obstacle is None:
        return field_
    t = np.sqrt(1.0 - coverage(obstacle, field_.geometry))
    return field_.with_components(field_.ex * t, field_.ey * t)


# -- trajectories -----------------------------------------------------------------------

def _wrap(a):
    """Map an angle difference to (-pi, pi]."""
    return -((-a + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered poses.

    ``interpolation`` is ``"linear"`` (centres and shortest-arc angle) or
    ``"step"`` (zero-order hold: each pose is kept until the next sample time),
    the latter describing stepped stage motion.
    """

    times: tuple[float, ...]
    poses: tuple[Pose, ...]
    interpolation: str = "linear"

    def __post_init__(self):
        if len(self.times) == 0 or len(self.times) != len(self.poses):
            raise ConfigurationError("trajectory needs >= 1 sample and one pose per time")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ConfigurationError("trajectory times must be strictly increasing")
        if self.interpolation not in ("linear", "step"):
            raise ConfigurationError(f"unknown interpolation {self.interpolation!r}")
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "poses", tuple(self.poses))

    @classmethod
    def from_samples(cls, samples, interpolation="linear"):
        """Build from ``[(t, Pose), ...]``."""
        samples = list(samples)
        return cls(tuple(t for t, _ in samples), tuple(p for _, p in samples), interpolation)

    @property
    def start(self):
        return self.times[0]

    @property
    def end(self):
        return self.times[-1]

    def to_records(self):
        return [{"t": t, "x0": p.x0, "y0": p.y0, "theta0": p.theta}
                for t, p in zip(self.times, self.poses)]


def pose_at(trajectory, t):
    """Pose at time ``t``; raises :class:`RangeError` outside the sampled span."""
    times = trajectory.times
    if not times[0] <= t <= times[-1]:
        raise RangeError(f"t={t!r} outside trajectory span [{times[0]!r}, {times[-1]!r}]")
    i = bisect.bisect_right(times, t) - 1
    if i >= len(times) - 1:
        return trajectory.poses[-1]
    a, b = trajectory.poses[i], trajectory.poses[i + 1]
    if trajectory.interpolation == "step":
        return a
    f = (t - times[i]) / (times[i + 1] - times[i])
    return Pose(a.x0 + f * (b.x0 - a.x0), a.y0 + f * (b.y0 - a.y0),
                a.theta + f * _wrap(b.theta - a.theta))


def load_trajectory(path, interpolation="linear"):
    """Read a JSON list of ``{t, x0, y0, theta0}`` records (SI units)."""
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", line=exc.lineno, path=path) from None
    if not isinstance(records, list):
        raise ParseError("expected a list of trajectory records", path=path)
    samples = []
    for k, rec in enumerate(records):
        try:
            samples.append((float(rec["t"]), Pose(float(rec.get("x0", 0.0)),
                                                  float(rec.get("y0", 0.0)),
                                                  float(rec.get("theta0", 0.0)))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"record {k}: {exc!r}", path=path) from None
    return Trajectory.from_samples(samples, interpolation)


def save_trajectory(path, trajectory):
    Path(path).write_text(json.dumps(trajectory.to_records(), indent=1))
