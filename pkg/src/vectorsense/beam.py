"""Paraxial vector-beam mode functions on sampled transverse grids.

Fields are two-component Jones fields ``(ex, ey)`` sampled at pixel centres of a
uniform Cartesian grid; arrays are indexed ``[row, col] == [y, x]``. All integrals
are midpoint Riemann sums, ``sum(f) * dx * dy``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq
from scipy.special import eval_hermite

from . import arrayio
from .errors import ConfigurationError, DomainError

#: Ratio of grid extent to the beam's 90-10 width below which constructors refuse.
MIN_EXTENT_RATIO = 4.0


@dataclass(frozen=True)
class GridGeometry:
    """Uniform transverse sampling grid; ``origin`` is the physical coordinate of its centre."""

    nx: int
    ny: int
    dx: float
    dy: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ConfigurationError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise ConfigurationError("pixel pitch must be positive")

    @classmethod
    def centered(cls, width, n=256, span=3.0):
        """Square ``n``x``n`` grid covering ``+-span * width`` around the axis."""
        pitch = 2.0 * span * width / n
        return cls(n, n, pitch, pitch)

    @property
    def extent(self):
        return self.nx * self.dx, self.ny * self.dy

    @property
    def pixel_area(self):
        return self.dx * self.dy

    @property
    def shape(self):
        return self.ny, self.nx

    @cached_property
    def x(self):
        return self.origin[0] + (np.arange(self.nx) - (self.nx - 1) / 2.0) * self.dx

    @cached_property
    def y(self):
        return self.origin[1] + (np.arange(self.ny) - (self.ny - 1) / 2.0) * self.dy

    @cached_property
    def mesh(self):
        """``(X, Y)`` pixel-centre coordinate arrays of shape ``(ny, nx)``."""
        return np.meshgrid(self.x, self.y)

    def to_dict(self):
        return {"nx": self.nx, "ny": self.ny, "dx": self.dx, "dy": self.dy,
                "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["nx"]), int(d["ny"]), float(d["dx"]), float(d["dy"]),
                   tuple(float(o) for o in d.get("origin", (0.0, 0.0))))


@dataclass(frozen=True, eq=False)
class VectorField:
    """Jones field ``(ex, ey)`` on ``geometry`` at propagation plane ``z``."""

    geometry: GridGeometry
    ex: np.ndarray
    ey: np.ndarray
    wavelength: float
    z: float = 0.0

    def __post_init__(self):
        ex = np.asarray(self.ex, dtype=complex)
        ey = np.asarray(self.ey, dtype=complex)
        if ex.shape != self.geometry.shape or ey.shape != self.geometry.shape:
            raise ConfigurationError(
                f"field arrays {ex.shape}/{ey.shape} do not match grid {self.geometry.shape}")
        object.__setattr__(self, "ex", ex)
        object.__setattr__(self, "ey", ey)

    @property
    def intensity(self):
        return np.abs(self.ex) ** 2 + np.abs(self.ey) ** 2

    @property
    def power(self):
        return float(self.intensity.sum() * self.geometry.pixel_area)

    def with_power(self, power):
        """Same field rescaled to total ``power``."""
        p = self.power
        if p <= 0:
            raise DomainError("cannot rescale a zero-power field")
        s = math.sqrt(power / p)
        return replace(self, ex=self.ex * s, ey=self.ey * s)

    def with_components(self, ex, ey):
        return replace(self, ex=ex, ey=ey)


@dataclass(frozen=True, eq=False)
class SchmidtDecomposition:
    """``E = sqrt(l1) u1 v1 + sqrt(l2) u2 v2`` with orthonormal ``u`` and ``v`` bases."""

    lambda1: float
    lambda2: float
    u1: np.ndarray
    u2: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    geometry: GridGeometry = field(repr=False)

    @property
    def a_x(self):
        return complex(self.u1[0])

    @property
    def a_y(self):
        return complex(self.u1[1])

    def reconstruct(self):
        """Return ``(ex, ey)`` rebuilt from the Schmidt terms."""
        r1, r2 = math.sqrt(self.lambda1), math.sqrt(self.lambda2)
        ex = r1 * self.u1[0] * self.v1 + r2 * self.u2[0] * self.v2
        ey = r1 * self.u1[1] * self.v1 + r2 * self.u2[1] * self.v2
        return ex, ey


# -- Hermite-Gaussian modes -------------------------------------------------------------

def _beam_params(waist, wavelength, z):
    zr = math.pi * waist ** 2 / wavelength
    wz = waist * math.sqrt(1.0 + (z / zr) ** 2)
    inv_r = z / (z ** 2 + zr ** 2)
    gouy = math.atan2(z, zr)
    return wz, inv_r, gouy


def hermite_gauss(m, n, x, y, waist, wavelength, z=0.0):
    """Evaluate the unit-power Hermite-Gaussian ``psi_mn`` at arbitrary points.

    Uses the ``exp(-i omega t)`` convention: a diverging wavefront carries
    ``exp(+i k r^2 / 2R)`` and the Gouy factor is ``exp(-i (m+n+1) zeta)``.
    """
    if m < 0 or n < 0:
        raise ConfigurationError("mode indices must be non-negative")
    if waist <= 0:
        raise ConfigurationError("waist must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    wz, inv_r, gouy = _beam_params(waist, wavelength, z)
    norm = math.sqrt(2.0 / math.pi / (2.0 ** (m + n) * math.factorial(m) * math.factorial(n))) / wz
    r2 = x * x + y * y
    amp = (norm * eval_hermite(m, math.sqrt(2.0) * x / wz)
           * eval_hermite(n, math.sqrt(2.0) * y / wz) * np.exp(-r2 / wz ** 2))
    if z == 0.0:
        return amp.astype(complex)
    k = 2.0 * math.pi / wavelength
    return amp * np.exp(1j * (0.5 * k * r2 * inv_r - (m + n + 1) * gouy))


@lru_cache(maxsize=64)
def _unit_marginal_width(orders: tuple[tuple[int, float], ...]) -> float:
    """90-10 width of the 1D marginal ``sum_k c_k |u_k(x)|^2`` for waist 1."""
    top = max(k for k, _ in orders)
    half = math.sqrt(top + 1.0) + 6.0
    x = np.linspace(-half, half, 40001)
    dens = np.zeros_like(x)
    for k, c in orders:
        u = eval_hermite(k, math.sqrt(2.0) * x) * np.exp(-x * x)
        dens += c * u * u / (2.0 ** k * math.factorial(k))
    cdf = np.cumsum(dens)
    cdf /= cdf[-1]
    return float(np.interp(0.9, cdf, x) - np.interp(0.1, cdf, x))


def mode_knife_width(orders_x, orders_y, waist, wavelength, z=0.0):
    """Analytic 90-10 widths ``(wx, wy)`` of a mode mixture.

    ``orders_x``/``orders_y`` are sequences of ``(hermite order, power weight)``.
    """
    wz = _beam_params(waist, wavelength, z)[0]
    return (wz * _unit_marginal_width(tuple(orders_x)),
            wz * _unit_marginal_width(tuple(orders_y)))


def _check_extent(geometry, widths):
    ex, ey = geometry.extent
    if ex < MIN_EXTENT_RATIO * widths[0] or ey < MIN_EXTENT_RATIO * widths[1]:
        raise ConfigurationError(
            f"grid extent {ex:.3g} x {ey:.3g} m is smaller than {MIN_EXTENT_RATIO:g}x the "
            f"beam's 90-10 width ({widths[0]:.3g} x {widths[1]:.3g} m)")


def hermite_gauss_mode(m, n, waist, wavelength, z, geometry):
    """Sample ``psi_mn`` on ``geometry``; ``sum |psi|^2 dA ~= 1``."""
    if waist <= 0:
        raise ConfigurationError("waist must be positive")
    _check_extent(geometry, mode_knife_width(((m, 1.0),), ((n, 1.0),), waist, wavelength, z))
    X, Y = geometry.mesh
    return hermite_gauss(m, n, X, Y, waist, wavelength, z)


_RADIAL_ORDERS = ((0, 0.5), (1, 0.5))


def radial_mode(waist, wavelength, z, geometry):
    """Ideal radially polarised doughnut: ``(x psi10 + y psi01) / sqrt(2)``."""
    if waist <= 0:
        raise ConfigurationError("waist must be positive")
    _check_extent(geometry, mode_knife_width(_RADIAL_ORDERS, _RADIAL_ORDERS, waist, wavelength, z))
    X, Y = geometry.mesh
    p10 = hermite_gauss(1, 0, X, Y, waist, wavelength, z)
    p01 = hermite_gauss(0, 1, X, Y, waist, wavelength, z)
    return VectorField(geometry, p10 / math.sqrt(2.0), p01 / math.sqrt(2.0), wavelength, z)


def azimuthal_mode(waist, wavelength, z, geometry):
    """Azimuthally polarised doughnut: ``(-x psi01 + y psi10) / sqrt(2)``."""
    if waist <= 0:
        raise ConfigurationError("waist must be positive")
    _check_extent(geometry, mode_knife_width(_RADIAL_ORDERS, _RADIAL_ORDERS, waist, wavelength, z))
    X, Y = geometry.mesh
    p10 = hermite_gauss(1, 0, X, Y, waist, wavelength, z)
    p01 = hermite_gauss(0, 1, X, Y, waist, wavelength, z)
    return VectorField(geometry, -p01 / math.sqrt(2.0), p10 / math.sqrt(2.0), wavelength, z)


def uniform_mode(waist, wavelength, z, geometry, jones=(1.0, 0.0)):
    """Fundamental Gaussian with a single, uniform Jones vector."""
    if waist <= 0:
        raise ConfigurationError("waist must be positive")
    j = np.asarray(jones, dtype=complex)
    j = j / np.linalg.norm(j)
    _check_extent(geometry, mode_knife_width(((0, 1.0),), ((0, 1.0),), waist, wavelength, z))
    psi = hermite_gauss_mode(0, 0, waist, wavelength, z, geometry)
    return VectorField(geometry, j[0] * psi, j[1] * psi, wavelength, z)


def imperfect_radial_mode(waist, wavelength, z, geometry, asymmetry=0.02, seed=0):
    """Radial mode whose four lobes carry slightly unequal amplitudes.

    Each HG lobe pair (x>0 / x<0 of ``psi10``, y>0 / y<0 of ``psi01``) is scaled by
    ``1 +- delta`` with ``delta`` drawn in ``[asymmetry/2, asymmetry]`` and a random
    sign, so the 180-degree rotation symmetry of the ideal mode is always broken.
    The result is renormalised to unit power. ``psi10`` vanishes on ``x = 0`` (and
    ``psi01`` on ``y = 0``) so the lobe scaling introduces no discontinuity.
    """
    ideal = radial_mode(waist, wavelength, z, geometry)
    rng = np.random.default_rng(seed)
    dx_, dy_ = rng.uniform(0.5 * asymmetry, asymmetry, size=2) * rng.choice([-1.0, 1.0], size=2)
    X, Y = geometry.mesh
    fx = np.where(X > 0, 1.0 + dx_, 1.0 - dx_)
    fy = np.where(Y > 0, 1.0 + dy_, 1.0 - dy_)
    return ideal.with_components(ideal.ex * fx, ideal.ey * fy).with_power(1.0)


# -- Schmidt decomposition --------------------------------------------------------------

def coherency_matrix(field):
    """``M_ij = sum E_i conj(E_j) dA`` (2x2 Hermitian)."""
    comps = (field.ex, field.ey)
    da = field.geometry.pixel_area
    m = np.empty((2, 2), dtype=complex)
    for i in range(2):
        for j in range(2):
            m[i, j] = np.vdot(comps[j], comps[i]) * da
    return m


def _orthogonal_mode(v1, geometry):
    """A unit-norm spatial mode orthogonal to ``v1`` (used when ``lambda2 == 0``)."""
    da = geometry.pixel_area
    X, Y = geometry.mesh
    scale = max(geometry.extent)
    for cand in (X / scale * v1, Y / scale * v1, np.ones_like(v1)):
        c = cand - np.vdot(v1, cand) * da * v1
        nrm = math.sqrt(float(np.vdot(c, c).real * da))
        if nrm > 1e-8:
            return c / nrm
    raise DomainError("could not construct an orthogonal spatial mode")


def schmidt_decompose(field):
    """Schmidt form of a two-component field via its polarisation coherency matrix."""
    m = coherency_matrix(field)
    evals, evecs = np.linalg.eigh(m)
    total = float(evals.sum())
    if not total > 0:
        raise DomainError("zero-power field has no Schmidt decomposition")
    lam2, lam1 = (max(float(e), 0.0) for e in evals)
    u2, u1 = evecs[:, 0].copy(), evecs[:, 1].copy()
    v1 = (np.conj(u1[0]) * field.ex + np.conj(u1[1]) * field.ey) / math.sqrt(lam1)
    if lam2 > 1e-14 * lam1:
        v2 = (np.conj(u2[0]) * field.ex + np.conj(u2[1]) * field.ey) / math.sqrt(lam2)
    else:
        # Factorable field: spatial partner is arbitrary, only orthonormality matters.
        lam2 = 0.0 if lam2 < 1e-300 else lam2
        v2 = _orthogonal_mode(v1, field.geometry)
    return SchmidtDecomposition(lam1, lam2, u1, u2, v1, v2, field.geometry)


# -- knife-edge width and calibration ---------------------------------------------------

def measure_knife_edge_width(field, axis="x"):
    """90-10 knife-edge width of ``field`` along ``axis`` ('x' or 'y').

    The cumulative power at pixel edges is interpolated with a monotone cubic, so
    the result converges well below one pixel pitch.
    """
    inten = field.intensity * field.geometry.pixel_area
    g = field.geometry
    if axis == "x":
        marg, centres, pitch = inten.sum(axis=0), g.x, g.dx
    elif axis == "y":
        marg, centres, pitch = inten.sum(axis=1), g.y, g.dy
    else:
        raise ConfigurationError(f"axis must be 'x' or 'y', got {axis!r}")
    total = float(marg.sum())
    if not total > 0:
        raise DomainError("zero-power field has no knife-edge width")
    edges = np.concatenate(([centres[0] - pitch / 2], centres + pitch / 2))
    cum = np.concatenate(([0.0], np.cumsum(marg))) / total
    # Strictly increasing samples for the interpolant; flat tails carry no crossing.
    keep = np.concatenate(([True], np.diff(cum) > 1e-15))
    interp = PchipInterpolator(edges[keep], cum[keep])
    lo_e, hi_e = edges[keep][0], edges[keep][-1]

    def crossing(level):
        return brentq(lambda s: float(interp(s)) - level, lo_e, hi_e, xtol=1e-15 * (hi_e - lo_e))

    return crossing(0.9) - crossing(0.1)


_MODE_BUILDERS = {"radial": radial_mode, "azimuthal": azimuthal_mode, "gaussian": uniform_mode}


def build_mode(kind, waist, wavelength, z, geometry):
    try:
        builder = _MODE_BUILDERS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown mode kind {kind!r}") from None
    return builder(waist, wavelength, z, geometry)


def calibrate_waist(width, kind="radial", wavelength=1.55e-6, geometry=None, axis="x"):
    """Waist whose sampled mode has 90-10 knife-edge width ``width`` (root-find)."""
    if width <= 0:
        raise ConfigurationError("width must be positive")
    geometry = geometry or GridGeometry.centered(width)

    def resid(w):
        return measure_knife_edge_width(build_mode(kind, w, wavelength, 0.0, geometry), axis) - width

    orders = ((0, 1.0),) if kind == "gaussian" else _RADIAL_ORDERS
    guess = width / _unit_marginal_width(orders)
    return brentq(resid, 0.9 * guess, 1.1 * guess, xtol=1e-12 * width)


# -- portable snapshots -----------------------------------------------------------------

def save_field(path, field_):
    meta = {"kind": "field", "geometry": field_.geometry.to_dict(),
            "wavelength": field_.wavelength, "z": field_.z}
    return arrayio.write_arrays(path, {
        "ex_re": field_.ex.real, "ex_im": field_.ex.imag,
        "ey_re": field_.ey.real, "ey_im": field_.ey.imag}, meta)


def load_field(path):
    arrays, meta, _ = arrayio.read_arrays(path)
    if meta.get("kind") != "field":
        raise ConfigurationError(f"{path} does not hold a field snapshot")
    geom = GridGeometry.from_dict(meta["geometry"])
    return VectorField(geom, arrays["ex_re"] + 1j * arrays["ex_im"],
                       arrays["ey_re"] + 1j * arrays["ey_im"], meta["wavelength"], meta["z"])
