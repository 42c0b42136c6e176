"""Four-channel detector traces: synthesis from the forward model, calibration, ingest.

A channel records, at nominal time ``t``, the optical power that arrived at
``t - skew``, scaled by ``gain``, shifted by ``offset`` and corrupted by white
Gaussian noise of standard deviation ``noise_sigma`` per sample.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import obstruction, polarimetry
from .errors import ConfigurationError, ParseError, RangeError

LABELS = polarimetry.CHANNEL_LABELS
MAX_SKEW = 1.3e-9
CSV_COLUMNS = ("t", "h", "v", "d", "a")


@dataclass(frozen=True)
class DetectorChannel:
    label: str
    gain: float = 1.0
    offset: float = 0.0
    noise_sigma: float = 0.0
    skew: float = 0.0

    def __post_init__(self):
        if self.label not in LABELS:
            raise ConfigurationError(f"channel label must be one of {LABELS}, got {self.label!r}")
        if not self.gain > 0:
            raise ConfigurationError(f"channel {self.label}: gain must be positive")
        if not self.noise_sigma >= 0:
            raise ConfigurationError(f"channel {self.label}: noise_sigma must be >= 0")
        if abs(self.skew) > MAX_SKEW:
            raise ConfigurationError(
                f"channel {self.label}: |skew| {self.skew:g} s exceeds {MAX_SKEW:g} s")

    @property
    def is_identity(self):
        return self.gain == 1.0 and self.offset == 0.0 and self.skew == 0.0

    def to_dict(self):
        return {"label": self.label, "gain": self.gain, "offset": self.offset,
                "noise_sigma": self.noise_sigma, "skew": self.skew}


def ideal_channels(noise_sigma=0.0):
    """Unit-gain, zero-offset, zero-skew channels H, V, D, A."""
    sig = np.broadcast_to(np.asarray(noise_sigma, dtype=float), (4,))
    return tuple(DetectorChannel(lab, noise_sigma=float(s)) for lab, s in zip(LABELS, sig))


@dataclass(frozen=True, eq=False)
class TraceSet:
    """Raw readings ``samples[channel, k]`` taken at ``t0 + k * sample_period``."""

    sample_period: float
    channels: tuple[DetectorChannel, ...]
    samples: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        if not self.sample_period > 0:
            raise ConfigurationError("sample_period must be positive")
        chans = tuple(self.channels)
        if tuple(c.label for c in chans) != LABELS:
            raise ConfigurationError(f"channels must be ordered {LABELS}")
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != 4:
            raise ConfigurationError(f"samples must have shape (4, N), got {arr.shape}")
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "samples", arr)

    @property
    def n_samples(self):
        return self.samples.shape[1]

    @property
    def times(self):
        return self.t0 + np.arange(self.n_samples) * self.sample_period

    @property
    def is_calibrated(self):
        return all(c.is_identity for c in self.channels)

    @property
    def noise_sigmas(self):
        """Per-sample noise in the units of :meth:`calibrated` samples."""
        return np.array([c.noise_sigma / c.gain for c in self.channels])

    def calibrated(self):
        """Skew-aligned, gain/offset-corrected copy with identity channels."""
        if self.is_calibrated:
            return self
        t = self.times
        out = np.empty_like(self.samples)
        for k, ch in enumerate(self.channels):
            row = self.samples[k]
            if ch.skew != 0.0:
                row = np.interp(t + ch.skew, t, row)
            out[k] = (row - ch.offset) / ch.gain
        chans = tuple(DetectorChannel(c.label, 1.0, 0.0, c.noise_sigma / c.gain, 0.0)
                      for c in self.channels)
        return replace(self, channels=chans, samples=out)

    def s0(self):
        cal = self.calibrated()
        return cal.samples[0] + cal.samples[1]


def synthesize(field, trajectory, obstacle, channels, sample_period, duration, rng_seed,
               t_start=None, threads=1):
    """Simulate the four detector traces of ``obstacle`` moving along ``trajectory``.

    Samples are taken at ``t_start + k * sample_period`` for ``k < round(duration /
    sample_period)``. The obstacle's own pose is ignored; poses come from the
    trajectory. Skew-shifted optical times are clamped to the trajectory span,
    nominal sample times are not (they raise :class:`RangeError`). The noise is
    drawn in one block from ``numpy.random.default_rng(rng_seed)`` so the result is
    bit-identical for a given seed regardless of ``threads``.
    """
    channels = tuple(channels)
    if not sample_period > 0:
        raise ConfigurationError("sample_period must be positive")
    n = int(round(duration / sample_period))
    if n < 1:
        raise ConfigurationError("duration shorter than one sample period")
    t_start = trajectory.start if t_start is None else float(t_start)
    t_nom = t_start + np.arange(n) * sample_period
    slack = 1e-9 * sample_period
    if t_nom[0] < trajectory.start - slack or t_nom[-1] > trajectory.end + slack:
        raise RangeError(f"sampling window [{t_nom[0]:g}, {t_nom[-1]:g}] s exceeds trajectory "
                         f"span [{trajectory.start:g}, {trajectory.end:g}] s")

    images = polarimetry.projected_images(field)
    totals = images.sum(axis=(1, 2)) * field.geometry.pixel_area

    # Pose per (channel, sample); intensities evaluated once per distinct pose.
    pose_index = {}
    poses = []
    idx = np.empty((4, n), dtype=np.int64)
    by_skew = {}
    for c, ch in enumerate(channels):
        if ch.skew in by_skew:
            idx[c] = idx[by_skew[ch.skew]]
            continue
        by_skew[ch.skew] = c
        tau = np.clip(t_nom - ch.skew, trajectory.start, trajectory.end)
        for k, tk in enumerate(tau):
            p = obstruction.pose_at(trajectory, float(tk))
            j = pose_index.get(p)
            if j is None:
                j = pose_index[p] = len(poses)
                poses.append(p)
            idx[c, k] = j

    def evaluate(p):
        return polarimetry.masked_intensities(images, field.geometry, obstacle.at(p), totals)

    if threads > 1 and len(poses) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            table = np.array(list(pool.map(evaluate, poses)))
    else:
        table = np.array([evaluate(p) for p in poses])

    clean = table[idx, np.arange(4)[:, None]]
    rng = np.random.default_rng(rng_seed)
    noise = rng.standard_normal((4, n))
    gain = np.array([c.gain for c in channels])[:, None]
    offset = np.array([c.offset for c in channels])[:, None]
    sigma = np.array([c.noise_sigma for c in channels])[:, None]
    raw = gain * clean + offset + sigma * noise
    return TraceSet(sample_period, channels, raw, t_start)


def _window_indices(trace, t_start, t_len):
    n = int(round(t_len / trace.sample_period))
    if n < 1:
        raise RangeError("empty integration window")
    i0 = int(round((t_start - trace.t0) / trace.sample_period))
    if i0 < 0 or i0 + n > trace.n_samples:
        raise RangeError(f"window [{t_start:g}, {t_start + t_len:g}] s outside the trace")
    return i0, n


def integrate_window(trace, t_start, t_len):
    """Mean calibrated power per channel over ``[t_start, t_start + t_len)``."""
    cal = trace.calibrated()
    i0, n = _window_indices(cal, t_start, t_len)
    return cal.samples[:, i0:i0 + n].mean(axis=1)


def integrate_windows(trace, starts, t_len):
    """:func:`integrate_window` for many windows, calibrating once. Shape ``(K, 4)``."""
    cal = trace.calibrated()
    out = np.empty((len(starts), 4))
    for k, ts in enumerate(starts):
        i0, n = _window_indices(cal, ts, t_len)
        out[k] = cal.samples[:, i0:i0 + n].mean(axis=1)
    return out


def window_sigma(trace, t_len):
    """Standard error of a window mean per channel (calibrated units)."""
    n = int(round(t_len / trace.sample_period))
    return trace.calibrated().noise_sigmas / math.sqrt(max(n, 1))


# -- files ------------------------------------------------------------------------------

def export_traces(path, trace, comments=()):
    """Write raw readings as CSV ``t,h,v,d,a`` with round-trip-exact number formatting."""
    t = trace.times
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for k in range(trace.n_samples):
            w.writerow([repr(float(t[k]))] + [repr(float(v)) for v in trace.samples[:, k]])


def save_calibration(path, channels):
    Path(path).write_text(json.dumps([c.to_dict() for c in channels], indent=1))


def load_calibration(path):
    """Channels from a JSON list (or ``{"channels": [...]}``) of per-channel records."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", line=exc.lineno, path=path) from None
    if isinstance(data, dict):
        data = data.get("channels")
    if not isinstance(data, list):
        raise ParseError("calibration must be a list of channel records", path=path)
    by_label = {}
    for rec in data:
        try:
            ch = DetectorChannel(str(rec["label"]).upper(), float(rec.get("gain", 1.0)),
                                 float(rec.get("offset", 0.0)),
                                 float(rec.get("noise_sigma", 0.0)), float(rec.get("skew", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad channel record {rec!r}: {exc}", path=path) from None
        by_label[ch.label] = ch
    missing = [lab for lab in LABELS if lab not in by_label]
    if missing:
        raise ParseError(f"calibration lacks channel(s) {', '.join(missing)}", path=path)
    return tuple(by_label[lab] for lab in LABELS)


def read_trace_csv(path, channels=None):
    """Parse a trace CSV into an *uncalibrated* :class:`TraceSet`."""
    rows = []
    header = None
    header_line = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            cells = next(csv.reader([stripped]))
            if header is None:
                header = [c.strip().lower() for c in cells]
                header_line = lineno
                continue
            rows.append((lineno, cells))
    if header is None:
        raise ParseError("empty trace file", path=path)
    for col in CSV_COLUMNS:
        if col not in header:
            raise ParseError(f"missing column {col!r}", line=header_line, path=path)
    if len(header) != len(CSV_COLUMNS):
        raise ParseError(f"expected 4 channel columns (h, v, d, a), found {len(header) - 1}",
                         line=header_line, path=path)
    order = [header.index(c) for c in CSV_COLUMNS]
    data = np.empty((len(rows), 5))
    for k, (lineno, cells) in enumerate(rows):
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(cells)}",
                             line=lineno, path=path)
        try:
            data[k] = [float(cells[j]) for j in order]
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno, path=path) from None
        if k > 0 and not data[k, 0] > data[k - 1, 0]:
            raise ParseError("time column is not strictly increasing", line=lineno, path=path)
    if len(rows) < 2:
        raise ParseError("trace needs at least two samples", path=path)
    t = data[:, 0]
    dt = (t[-1] - t[0]) / (len(t) - 1)
    steps = np.diff(t)
    bad = np.flatnonzero(np.abs(steps - dt) > 1e-6 * dt)
    if bad.size:
        raise ParseError("non-uniform sampling", line=rows[bad[0] + 1][0], path=path)
    channels = ideal_channels() if channels is None else tuple(channels)
    return TraceSet(dt, channels, data[:, 1:].T.copy(), float(t[0]))


def ingest(path, calibration=None):
    """Read a trace CSV and return it skew-aligned and gain/offset-corrected.

    ``calibration`` is a sequence of :class:`DetectorChannel`, a path to a
    calibration JSON file, or ``None`` for ideal channels.
    """
    if calibration is not None and not isinstance(calibration, (list, tuple)):
        calibration = load_calibration(calibration)
    return read_trace_csv(path, calibration).calibrated()
