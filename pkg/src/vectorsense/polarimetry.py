"""Linear-polariser projections, integrated intensities and Stokes parameters."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import obstruction
from .errors import DomainError

#: Polariser angles of the four detector channels, in channel order H, V, D, A.
CHANNEL_ANGLES = (0.0, math.pi / 2, math.pi / 4, 3 * math.pi / 4)
CHANNEL_LABELS = ("H", "V", "D", "A")

RAW = "raw"
NORMALIZED = "s0_to_initial_and_s12_to_instant_s0"

#: Negative intensities down to ``-CLAMP_TOLERANCE * s0`` are treated as noise.
CLAMP_TOLERANCE = 1e-6


@dataclass(frozen=True)
class StokesVector:
    s0: float
    s1: float
    s2: float
    normalization: str = RAW
    degenerate: bool = False
    reliable: bool = True
    clamped: int = 0
    flagged: bool = False

    def as_array(self):
        return np.array([self.s0, self.s1, self.s2])

    @property
    def degree_of_linear_polarization(self):
        if self.s0 <= 0:
            return 0.0
        return math.hypot(self.s1, self.s2) / self.s0


def projector(phi):
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c * c, s * c], [s * c, s * s]])


def project(field, phi):
    """Apply an ideal linear polariser at angle ``phi`` (radians from x) to every pixel."""
    p = projector(phi)
    ex = p[0, 0] * field.ex + p[0, 1] * field.ey
    ey = p[1, 0] * field.ex + p[1, 1] * field.ey
    return field.with_components(ex, ey)


def integrate(field):
    return field.power


def intensity(field, obstacle, phi):
    """Power transmitted through ``obstacle`` and then a polariser at ``phi``."""
    return integrate(project(obstruction.apply(obstacle, field), phi))


def projected_images(field):
    """Stack ``(4, ny, nx)`` of ``|P_phi E|^2`` for the four channel angles."""
    out = np.empty((4,) + field.geometry.shape)
    for k, phi in enumerate(CHANNEL_ANGLES):
        out[k] = np.abs(math.cos(phi) * field.ex + math.sin(phi) * field.ey) ** 2
    return out


def masked_intensities(images, geometry, obstacle, totals=None):
    """Four channel powers behind ``obstacle`` given projected intensity ``images``.

    Uses ``I(phi) = I_open(phi) - sum(coverage * |P_phi E|^2) dA`` so that only the
    obstacle's bounding box is visited. ``totals`` may carry precomputed open powers.
    """
    da = geometry.pixel_area
    if totals is None:
        totals = images.sum(axis=(1, 2)) * da
    if obstacle is None:
        return np.array(totals, dtype=float)
    rows, cols, frac = obstruction.coverage_window(obstacle, geometry)
    blocked = np.einsum("kij,ij->k", images[:, rows, cols], frac) * da
    return np.asarray(totals, dtype=float) - blocked


def intensities(field, obstacle=None):
    """``(I0, I90, I45, I135)`` behind ``obstacle``."""
    return masked_intensities(projected_images(field), field.geometry, obstacle)


def stokes_from_intensities(i0, i90, i45, i135):
    """Raw ``(s0, s1, s2)`` from the four polariser powers.

    Negative inputs (detector noise after calibration) are clamped to zero; the
    vector records how many were clamped and is ``flagged`` when any was below
    ``-CLAMP_TOLERANCE * s0``. All-zero input gives a ``degenerate`` zero vector.
    """
    vals = [float(i0), float(i90), float(i45), float(i135)]
    scale = max(vals[0] + vals[1], 0.0)
    clamped = 0
    flagged = False
    for k, v in enumerate(vals):
        if v < 0.0:
            clamped += 1
            if v < -CLAMP_TOLERANCE * scale:
                flagged = True
            vals[k] = 0.0
    a, b, c, d = vals
    if a == b == c == d == 0.0:
        return StokesVector(0.0, 0.0, 0.0, degenerate=True, reliable=False,
                            clamped=clamped, flagged=flagged)
    return StokesVector(a + b, a - b, c - d, clamped=clamped, flagged=flagged)


def stokes_from_schmidt(decomp, with_s3=False):
    """Stokes parameters from a Schmidt decomposition.

    ``s1 = (l1 - l2)(|ax|^2 - |ay|^2)``, ``s2 = (l1 - l2)(ax ay* + ax* ay)``.
    With ``with_s3`` the circular component is returned too, as ``(stokes, s3)``.
    """
    d = decomp.lambda1 - decomp.lambda2
    ax, ay = decomp.a_x, decomp.a_y
    sv = StokesVector(decomp.lambda1 + decomp.lambda2,
                      d * (abs(ax) ** 2 - abs(ay) ** 2),
                      d * (ax * ay.conjugate() + ax.conjugate() * ay).real)
    if with_s3:
        s3 = (1j * d * (ax * ay.conjugate() - ax.conjugate() * ay)).real
        return sv, s3
    return sv


def normalize(series, floor=1e-3):
    """Normalise ``s0`` to its first value and ``s1, s2`` to the instantaneous ``s0``.

    Entries whose raw ``s0`` is below ``floor * s0[0]`` are marked unreliable and get
    NaN ``s1``/``s2`` instead of a division by a vanishing power.
    """
    series = list(series)
    if not series:
        return []
    ref = series[0].s0
    if not ref > 0:
        raise DomainError("first element must have s0 > 0")
    out = []
    for sv in series:
        s0n = sv.s0 / ref
        if sv.s0 < floor * ref or sv.s0 <= 0:
            out.append(StokesVector(s0n, math.nan, math.nan, NORMALIZED, sv.degenerate,
                                    False, sv.clamped, sv.flagged))
        else:
            out.append(StokesVector(s0n, sv.s1 / sv.s0, sv.s2 / sv.s0, NORMALIZED,
                                    sv.degenerate, sv.reliable, sv.clamped, sv.flagged))
    return out


def write_stokes_csv(path, times, series, comments=()):
    """CSV with columns ``t_seconds, s0, s1, s2, reliability_flag`` (1 = reliable)."""
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["t_seconds", "s0", "s1", "s2", "reliability_flag"])
        for t, sv in zip(times, series):
            w.writerow([repr(float(t)), repr(sv.s0), repr(sv.s1), repr(sv.s2),
                        int(sv.reliable)])
