"""Inversion of polarimetric signals into kinematics.

Position tracking precomputes, for every candidate obstacle centre on a mesh, the
four expected channel powers (a look-up table). A measurement is then scored per
cell with an independent-Gaussian channel likelihood; priors (initial half-plane,
step-to-step continuity) lift the 180-degree ambiguity of an ideal radial mode.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import logsumexp

from . import arrayio, polarimetry
from .beam import GridGeometry, VectorField
from .errors import ConfigurationError, DegenerateError, DetectionError, ParseError
from .obstruction import Bar, Disk, HalfPlane, Obstacle, Pose

IDEAL = "ideal_mode"
TOMOGRAPHY = "measured_tomography"
CREDIBLE_MASS = 0.68
#: Islands of the credible region holding at least this posterior mass count as modes.
ISLAND_MASS = 0.1


@dataclass(frozen=True, eq=False)
class Tomography:
    """Intensity images ``|P_phi E|^2`` for phi = 0, 90, 45, 135 degrees."""

    geometry: GridGeometry
    images: np.ndarray

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=float)
        if imgs.shape != (4,) + self.geometry.shape:
            raise ConfigurationError(f"tomography must have shape (4, ny, nx), got {imgs.shape}")
        if (imgs < 0).any():
            raise ConfigurationError("tomography images must be non-negative")
        object.__setattr__(self, "images", imgs)

    @classmethod
    def from_field(cls, field_):
        return cls(field_.geometry, polarimetry.projected_images(field_))

    @property
    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.images, "<f8").tobytes()).hexdigest()


_TOMO_NAMES = ("i0", "i90", "i45", "i135")


def save_tomography(path, tomo):
    return arrayio.write_arrays(path, dict(zip(_TOMO_NAMES, tomo.images)),
                                {"kind": "tomography", "geometry": tomo.geometry.to_dict()})


def load_tomography(path):
    arrays, meta, _ = arrayio.read_arrays(path)
    if meta.get("kind") != "tomography":
        raise ParseError("file does not hold a tomography", path=path)
    geom = GridGeometry.from_dict(meta["geometry"])
    return Tomography(geom, np.stack([arrays[n] for n in _TOMO_NAMES]))


# -- look-up tables ---------------------------------------------------------------------

def obstacle_to_dict(ob):
    shape = ob.shape
    if isinstance(shape, Disk):
        d = {"kind": "disk", "diameter": shape.diameter}
    elif isinstance(shape, Bar):
        d = {"kind": "bar", "width": shape.width}
    else:
        d = {"kind": "half_plane"}
    d.update(theta=ob.pose.theta, diffraction_scale=ob.diffraction_scale)
    return d


def obstacle_from_dict(d):
    kind = d["kind"]
    if kind == "disk":
        shape = Disk(float(d["diameter"]))
    elif kind == "bar":
        shape = Bar(float(d["width"]))
    elif kind == "half_plane":
        shape = HalfPlane()
    else:
        raise ConfigurationError(f"unknown obstacle kind {kind!r}")
    return Obstacle(shape, Pose(0.0, 0.0, float(d.get("theta", 0.0))),
                    float(d.get("diffraction_scale", 1.35)))


@dataclass(frozen=True, eq=False)
class LookupTable:
    """Expected channel powers ``expected[iy, ix, channel]`` for obstacle centres ``(xs[ix], ys[iy])``."""

    xs: np.ndarray
    ys: np.ndarray
    expected: np.ndarray
    obstacle: Obstacle
    source: str
    open_power: np.ndarray
    source_hash: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def step(self):
        if "step" in self.meta:
            return float(self.meta["step"])
        return float(self.xs[1] - self.xs[0]) if self.xs.size > 1 else 0.0

    @property
    def shape(self):
        return self.ys.size, self.xs.size

    @property
    def stokes(self):
        e = self.expected
        return np.stack([e[..., 0] + e[..., 1], e[..., 0] - e[..., 1], e[..., 2] - e[..., 3]],
                        axis=-1)

    def position(self, iy, ix):
        return float(self.xs[ix]), float(self.ys[iy])

    def nearest_index(self, x, y):
        return int(np.abs(self.ys - y).argmin()), int(np.abs(self.xs - x).argmin())

    def grid_spec(self):
        return {"x_min": float(self.xs[0]), "x_max": float(self.xs[-1]), "nx": int(self.xs.size),
                "y_min": float(self.ys[0]), "y_max": float(self.ys[-1]), "ny": int(self.ys.size),
                "step": self.step}

    def symmetry_residual(self):
        """Max relative change of the table under a 180-degree rotation of the grid.

        Only meaningful for grids symmetric about the axis; returns NaN otherwise.
        """
        if not (np.allclose(self.xs, -self.xs[::-1]) and np.allclose(self.ys, -self.ys[::-1])):
            return math.nan
        rot = self.expected[::-1, ::-1, :]
        scale = float(np.abs(self.expected).max()) or 1.0
        return float(np.abs(self.expected - rot).max() / scale)


def _lut_axis(half, step):
    n = int(math.floor(half / step + 1e-9))
    return np.arange(-n, n + 1) * step


def build_lut(source, obstacle, step=50e-6, half_range=None, threads=1):
    """Tabulate expected channel powers for obstacle centres on a square mesh.

    ``source`` is a :class:`VectorField` (ideal mode) or a :class:`Tomography`.
    ``half_range`` is a float or ``(hx, hy)``; cells lie at integer multiples of
    ``step`` within ``[-hx, hx] x [-hy, hy]``. The obstacle's rotation angle is kept,
    its centre is scanned.
    """
    if isinstance(source, VectorField):
        tomo, kind = Tomography.from_field(source), IDEAL
    elif isinstance(source, Tomography):
        tomo, kind = source, TOMOGRAPHY
    else:
        raise ConfigurationError("LUT source must be a VectorField or a Tomography")
    geom = tomo.geometry
    if not step > 0:
        raise ConfigurationError("LUT step must be positive")
    ext_x, ext_y = geom.extent
    if half_range is None:
        half_range = (0.25 * ext_x, 0.25 * ext_y)
    hx, hy = (half_range, half_range) if np.isscalar(half_range) else half_range
    if hx > 0.5 * ext_x or hy > 0.5 * ext_y:
        raise ConfigurationError(
            f"LUT bounds +-({hx:g}, {hy:g}) m exceed the field extent ({ext_x:g} x {ext_y:g} m)")
    if step > 2 * min(hx, hy) and min(hx, hy) > 0:
        raise ConfigurationError("LUT step larger than the table extent")
    if isinstance(obstacle.shape, Disk) and obstacle.effective_diameter >= min(ext_x, ext_y):
        raise ConfigurationError("obstacle is larger than the grid extent")
    xs, ys = _lut_axis(hx, step), _lut_axis(hy, step)
    images = tomo.images
    totals = images.sum(axis=(1, 2)) * geom.pixel_area
    theta = obstacle.pose.theta

    def row(y):
        return [polarimetry.masked_intensities(images, geom, obstacle.at(Pose(x, y, theta)), totals)
                for x in xs]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, ys))
    else:
        rows = [row(y) for y in ys]
    expected = np.clip(np.array(rows), 0.0, None)
    return LookupTable(xs, ys, expected, obstacle, kind, totals, tomo.digest,
                       {"geometry": geom.to_dict(), "step": float(step)})


def save_lut(path, lut, provenance=None):
    meta = {"kind": "lut", "grid": lut.grid_spec(), "shape": obstacle_to_dict(lut.obstacle),
            "source": lut.source, "source_hash": lut.source_hash,
            "open_power": [float(v) for v in lut.open_power], "extra": lut.meta}
    if provenance:
        meta["provenance"] = provenance
    return arrayio.write_arrays(path, {"xs": lut.xs, "ys": lut.ys,
                                       **{n: lut.expected[..., k] for k, n in enumerate(_TOMO_NAMES)}},
                                meta)


def load_lut(path):
    arrays, meta, _ = arrayio.read_arrays(path)
    if meta.get("kind") != "lut":
        raise ParseError("file does not hold a look-up table", path=path)
    try:
        planes = [arrays[n] for n in _TOMO_NAMES]
        xs, ys = arrays["xs"], arrays["ys"]
    except KeyError as exc:
        raise ConfigurationError(f"LUT lacks plane {exc.args[0]!r}") from None
    if any(p.shape != (ys.size, xs.size) for p in planes):
        raise ConfigurationError("LUT planes do not match the grid axes")
    return LookupTable(xs, ys, np.stack(planes, axis=-1), obstacle_from_dict(meta["shape"]),
                       meta["source"], np.array(meta["open_power"]), meta.get("source_hash", ""),
                       meta.get("extra", {}))


# -- likelihood and posterior -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Posterior:
    log_likelihood: np.ndarray
    probability: np.ndarray
    map_index: tuple[int, int]
    map_estimate: tuple[float, float]
    credible_region: np.ndarray
    degenerate_flag: bool
    island_masses: tuple[float, ...]

    @property
    def region_cells(self):
        return int(self.credible_region.sum())

    @property
    def region_mass(self):
        return float(self.probability[self.credible_region].sum())


def credible_region(prob, mass=CREDIBLE_MASS):
    """Highest-posterior-density cell set with at least ``mass`` probability."""
    flat = prob.ravel()
    order = np.argsort(flat, kind="stable")[::-1]
    cum = np.cumsum(flat[order])
    n = int(np.searchsorted(cum, mass - 1e-12)) + 1
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:min(n, flat.size)]] = True
    return mask.reshape(prob.shape)


def _islands(prob, region):
    labels, count = ndimage.label(region, structure=np.ones((3, 3)))
    if count == 0:
        return ()
    masses = ndimage.sum_labels(prob, labels, index=np.arange(1, count + 1))
    return tuple(sorted((float(m) for m in masses), reverse=True))


def likelihood(lut, measured, sigma, log_prior=None, mass=CREDIBLE_MASS):
    """Posterior over LUT cells for one four-channel measurement.

    ``log L = -sum_c (measured_c - expected_c)^2 / (2 sigma_c^2)`` evaluated in channel
    space, where the noise is independent. ``log_prior`` (same shape as the grid,
    ``-inf`` allowed) defaults to uniform.
    """
    measured = np.asarray(measured, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (4,))
    if not (sigma > 0).all():
        raise ConfigurationError("noise sigmas must be positive")
    resid = (lut.expected - measured) / sigma
    loglik = -0.5 * np.einsum("ijk,ijk->ij", resid, resid)
    logpost = loglik if log_prior is None else loglik + log_prior
    norm = logsumexp(logpost)
    if not np.isfinite(norm):
        raise DegenerateError("prior excludes every LUT cell")
    prob = np.exp(logpost - norm)
    prob /= prob.sum()
    iy, ix = np.unravel_index(int(np.argmax(logpost)), logpost.shape)
    region = credible_region(prob, mass)
    islands = _islands(prob, region)
    degenerate = sum(m >= ISLAND_MASS for m in islands) >= 2
    return Posterior(loglik, prob, (int(iy), int(ix)), lut.position(iy, ix), region,
                     degenerate, islands)


def best_fit_chi2(lut, measurements, sigma):
    """Smallest chi-square over LUT cells for each row of ``measurements`` (shape ``(K, 4)``)."""
    meas = np.atleast_2d(np.asarray(measurements, dtype=float))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (4,))
    table = lut.expected.reshape(-1, 4)
    out = np.empty(meas.shape[0])
    for k, m in enumerate(meas):
        r = (table - m) / sigma
        out[k] = np.einsum("ij,ij->i", r, r).min()
    return out


def half_plane_log_prior(lut, angle):
    """0 on cells with ``x cos(angle) + y sin(angle) >= 0``, ``-inf`` elsewhere."""
    X, Y = np.meshgrid(lut.xs, lut.ys)
    allowed = X * math.cos(angle) + Y * math.sin(angle) >= -1e-12 * max(lut.step, 1e-30)
    return np.where(allowed, 0.0, -np.inf)


def continuity_log_prior(lut, previous, scale):
    X, Y = np.meshgrid(lut.xs, lut.ys)
    return -((X - previous[0]) ** 2 + (Y - previous[1]) ** 2) / (2.0 * scale ** 2)


@dataclass(frozen=True, eq=False)
class TrackPoint:
    t: float
    x: float
    y: float
    region_cells: int
    degenerate: bool
    reliable: bool
    map_index: tuple[int, int] | None = None
    region: np.ndarray | None = field(default=None, repr=False)

    def contains(self, iy, ix):
        return self.region is not None and bool(self.region[iy, ix])


def track(lut, measurements, sigma, times=None, half_plane=None, continuity_scale=None,
          reliable=None, s0_floor=1e-3):
    """Per-sample MAP estimates with optional priors.

    ``half_plane`` (radians) restricts the first reliable sample to the half-plane
    whose normal points along that angle. ``continuity_scale`` (metres) adds an
    isotropic Gaussian penalty on the displacement from the previous estimate.
    Samples whose ``s0`` is below ``s0_floor`` of the unobstructed power (or that are
    marked unreliable) yield a null estimate that carries the last credible region.
    """
    meas = np.atleast_2d(np.asarray(measurements, dtype=float))
    if meas.shape[0] == 0:
        raise ConfigurationError("measurement series is empty")
    times = np.arange(meas.shape[0], dtype=float) if times is None else np.asarray(times, float)
    if reliable is None:
        open_s0 = lut.open_power[0] + lut.open_power[1]
        reliable = (meas[:, 0] + meas[:, 1]) >= s0_floor * open_s0
    use_continuity = continuity_scale is not None and math.isfinite(continuity_scale)
    half_prior = None if half_plane is None else half_plane_log_prior(lut, half_plane)
    out = []
    previous = None
    last_region = None
    for k, m in enumerate(meas):
        if not reliable[k]:
            cells = int(last_region.sum()) if last_region is not None else 0
            out.append(TrackPoint(float(times[k]), math.nan, math.nan, cells, False, False,
                                  None, last_region))
            continue
        prior = None
        if previous is None:
            prior = half_prior
        elif use_continuity:
            prior = continuity_log_prior(lut, previous, continuity_scale)
        post = likelihood(lut, m, sigma, prior)
        previous = post.map_estimate
        last_region = post.credible_region
        out.append(TrackPoint(float(times[k]), previous[0], previous[1], post.region_cells,
                              post.degenerate_flag, True, post.map_index, post.credible_region))
    return out


def write_track_csv(path, points, comments=()):
    import csv

    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["t", "x0_hat", "y0_hat", "region_cell_count", "degenerate_flag"])
        for p in points:
            w.writerow([repr(p.t), repr(p.x), repr(p.y), p.region_cells, int(p.degenerate)])


# -- rotor ------------------------------------------------------------------------------

def rotor_angle(stokes, amplitude=None, floor=0.05):
    """Bar angle in [0, pi) from the phase of ``(s1, s2)``.

    A bar at angle theta through the axis gives ``s1 = -C cos 2theta`` and
    ``s2 = -C sin 2theta``, so ``theta = atan2(-s2, -s1) / 2 mod pi``. When the circle
    radius ``amplitude`` is known, points closer than ``floor * amplitude`` to the
    origin are rejected as undetermined.
    """
    s1, s2 = float(stokes.s1), float(stokes.s2)
    r = math.hypot(s1, s2)
    limit = floor * amplitude if amplitude is not None else 1e-12 * max(abs(stokes.s0), 1e-300)
    if not r > limit or math.isnan(r):
        raise DegenerateError("Stokes modulation below the noise floor; bar angle undetermined")
    return (0.5 * math.atan2(-s2, -s1)) % math.pi


def rotor_amplitude(series):
    """Mean ``(s1, s2)`` circle radius over ``series`` (typically the first half turn)."""
    r = [math.hypot(s.s1, s.s2) for s in series if s.reliable]
    if not r:
        raise DegenerateError("no reliable samples to calibrate the rotor amplitude")
    return float(np.mean(r))


# -- knife edge -------------------------------------------------------------------------

@dataclass(frozen=True)
class KnifeDirection:
    axis: str
    motion_angle: float
    s1_energy: float
    s2_energy: float
    low_confidence: bool
    ambiguous_180: bool = True
    window: tuple[int, int] = (0, 0)


def knife_direction(series, onset=0.99, done=0.01):
    """Axis of motion of an opaque edge sweeping across the beam.

    ``series`` is a list of raw :class:`StokesVector` in time order, starting with an
    unobstructed beam. While the edge enters, the blocked light is polarised along
    the edge normal ``alpha``, giving ``(s1, s2) ~ -(cos 2alpha, sin 2alpha)``; the
    mean modulation over the first half of the transit therefore yields the motion
    axis modulo 180 degrees (the sign of motion is never observable). The
    classification is flagged low-confidence within 22.5 degrees of a diagonal.
    """
    s = np.array([[v.s0, v.s1, v.s2] for v in series], dtype=float)
    if s.shape[0] < 2 or not s[0, 0] > 0:
        raise DetectionError("series must start with an unobstructed, nonzero s0")
    ref = s[0, 0]
    s0n = s[:, 0] / ref
    below_on = np.flatnonzero(s0n < onset)
    if below_on.size == 0:
        raise DetectionError("no s0 transition found")
    i0 = int(below_on[0])
    below_done = np.flatnonzero(s0n[i0:] < done)
    if below_done.size == 0:
        raise DetectionError("s0 never reaches full coverage")
    i1 = i0 + int(below_done[0])
    s1n, s2n = s[i0:i1 + 1, 1] / ref, s[i0:i1 + 1, 2] / ref
    e1, e2 = float(np.sum(s1n ** 2)), float(np.sum(s2n ** 2))
    early = s0n[i0:i1 + 1] > 0.5
    if not early.any():
        early[:] = True
    alpha = (0.5 * math.atan2(-s2n[early].mean(), -s1n[early].mean())) % math.pi
    from_axis = min(alpha, abs(alpha - math.pi / 2), math.pi - alpha)
    axis = "horizontal" if min(alpha, math.pi - alpha) <= abs(alpha - math.pi / 2) else "vertical"
    return KnifeDirection(axis, alpha, e1, e2, from_axis > math.pi / 8, True, (i0, i1))


# -- trigger ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    i_start: int
    i_end: int
    t_start: float
    t_end: float
    truncated: bool = False

    @property
    def duration(self):
        return self.t_end - self.t_start


def trigger(trace, threshold_fraction=0.05, hysteresis=0.5, settle_time=50e-9):
    """Windows where ``s0`` departs from its running baseline.

    An event opens when ``|s0 - baseline|`` exceeds ``threshold_fraction`` of the
    initial power and closes at the first sample from which ``s0`` stays within a
    band of width ``hysteresis * threshold_fraction`` for ``settle_time``; that level
    becomes the new baseline. Windows may abut: there is no dead time.
    """
    if not (0 < threshold_fraction < 1 and 0 < hysteresis < 1):
        raise ConfigurationError("threshold_fraction and hysteresis must lie in (0, 1)")
    s0 = trace.s0()
    n = s0.size
    t = trace.times
    hold = max(1, min(n, int(round(settle_time / trace.sample_period))))
    ref = float(np.median(s0[:hold]))
    if not ref > 0:
        ref = float(np.abs(s0).max()) or 1.0
    band_in = threshold_fraction * ref
    band_out = hysteresis * threshold_fraction * ref
    win = sliding_window_view(s0, hold)
    ptp = win.max(axis=1) - win.min(axis=1)
    settled = np.flatnonzero(ptp <= band_out)

    events = []
    baseline = float(np.median(s0[:hold]))
    acc, cnt = 0.0, 0
    i = 0
    while i < n:
        if abs(s0[i] - baseline) <= band_in:
            acc += s0[i]
            cnt += 1
            baseline = acc / cnt
            i += 1
            continue
        start = i
        j = np.searchsorted(settled, start + 1)
        if j == settled.size:
            events.append(Event(start, n - 1, float(t[start]), float(t[n - 1]), True))
            break
        end = int(settled[j])
        events.append(Event(start, end, float(t[start]), float(t[end])))
        baseline = float(np.median(s0[end:end + hold]))
        acc, cnt = 0.0, 0
        i = end
    return events
