"""Scenario configurations and runners behind the command-line tool.

Configs are JSON documents validated with pydantic; lengths are metres, times
seconds, angles radians. Runners validate everything (including derived
quantities such as the sampling grid) before computing or writing anything.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, model_validator

from . import __version__, beam, obstruction, polarimetry, sensing, tracking
from .errors import ConfigurationError, DetectionError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BeamSpec(_Strict):
    kind: Literal["radial", "azimuthal", "gaussian"] = "radial"
    width: PositiveFloat = Field(description="90-10 knife-edge width")
    wavelength: PositiveFloat = 1.55e-6
    grid_n: int = Field(256, ge=8)
    grid_span: PositiveFloat = Field(2.5, description="grid half-extent in units of width")
    asymmetry: float = Field(0.0, ge=0.0, lt=0.5, description="radial-mode lobe imbalance")
    asymmetry_seed: int = 0

    @model_validator(mode="after")
    def _extent(self):
        if 2.0 * self.grid_span < beam.MIN_EXTENT_RATIO:
            raise ValueError(f"grid_span must be >= {beam.MIN_EXTENT_RATIO / 2:g} beam widths")
        if self.asymmetry and self.kind != "radial":
            raise ValueError("asymmetry applies to the radial mode only")
        return self


class ObstacleSpec(_Strict):
    kind: Literal["disk", "bar", "half_plane"]
    diameter: PositiveFloat | None = None
    width: PositiveFloat | None = None
    theta: float = 0.0
    diffraction_scale: float = Field(1.0, ge=1.0, le=2.0)

    @model_validator(mode="after")
    def _size(self):
        if self.kind == "disk" and self.diameter is None:
            raise ValueError("disk needs a diameter")
        if self.kind == "bar" and self.width is None:
            raise ValueError("bar needs a width")
        return self

    def build(self):
        shape = {"disk": lambda: obstruction.Disk(self.diameter),
                 "bar": lambda: obstruction.Bar(self.width),
                 "half_plane": obstruction.HalfPlane}[self.kind]()
        return obstruction.Obstacle(shape, obstruction.Pose(0.0, 0.0, self.theta),
                                    self.diffraction_scale)


class ChannelSpec(_Strict):
    label: Literal["H", "V", "D", "A"]
    gain: PositiveFloat = 1.0
    offset: float = 0.0
    skew: float = Field(0.0, ge=-sensing.MAX_SKEW, le=sensing.MAX_SKEW)


class AcquisitionSpec(_Strict):
    sample_period: PositiveFloat
    window: PositiveFloat
    noise_sigma: float | list[float] = Field(0.0, description="per-sample, calibrated units")
    target_snr: PositiveFloat | None = None
    seed: int
    channels: list[ChannelSpec] | None = None

    @model_validator(mode="after")
    def _check(self):
        sig = self.noise_sigma if isinstance(self.noise_sigma, list) else [self.noise_sigma]
        if len(sig) not in (1, 4) or any(s < 0 for s in sig):
            raise ValueError("noise_sigma must be one or four non-negative values")
        if self.window < self.sample_period * (1 - 1e-9):
            raise ValueError("window shorter than one sample period")
        n = self.window / self.sample_period
        if abs(n - round(n)) > 1e-6 * n:
            raise ValueError("window must be an integer number of sample periods")
        if self.channels is not None and [c.label for c in self.channels] != list(sensing.LABELS):
            raise ValueError("channels must list H, V, D, A in order")
        return self

    @property
    def samples_per_window(self):
        return int(round(self.window / self.sample_period))

    def build_channels(self, sigma=None):
        sig = self.noise_sigma if sigma is None else sigma
        sig = np.broadcast_to(np.asarray(sig, dtype=float), (4,))
        specs = self.channels or [ChannelSpec(label=lab) for lab in sensing.LABELS]
        # Noise is specified in calibrated units; the detector sees it scaled by gain.
        return tuple(sensing.DetectorChannel(c.label, c.gain, c.offset, float(s) * c.gain, c.skew)
                     for c, s in zip(specs, sig))


class TrackingSpec(_Strict):
    lut_step: PositiveFloat = 50e-6
    lut_half_range: PositiveFloat = Field(1.5, description="in units of beam width")
    half_plane: float | None = math.pi / 2
    continuity_scale: PositiveFloat | None = 200e-6
    sigma_floor: PositiveFloat = Field(1e-9, description="relative to unobstructed s0")
    s0_floor: float = Field(1e-3, ge=0.0, lt=1.0)


class RotorMotion(_Strict):
    n_poses: int = Field(360, ge=2)
    start_angle: float = 0.0


class TrackMotion(_Strict):
    step: PositiveFloat = 50e-6
    x_start: float = -2.5e-3
    x_stop: float = 2.5e-3
    y: float = 0.5e-3


class KnifeMotion(_Strict):
    speed: float = Field(27.0, ge=0.0)
    normal: float = Field(0.0, description="edge normal; the edge advances against it")
    start_offset: PositiveFloat = Field(3.0, description="in units of beam width")
    duration: PositiveFloat | None = None


class TriggerSpec(_Strict):
    threshold_fraction: float = Field(0.05, gt=0.0, lt=1.0)
    hysteresis: float = Field(0.5, gt=0.0, lt=1.0)
    settle_time: PositiveFloat = 50e-9


class RotorScenario(_Strict):
    beam: BeamSpec = BeamSpec(width=1.95e-3)
    obstacle: ObstacleSpec = ObstacleSpec(kind="bar", width=0.79e-3)
    motion: RotorMotion = RotorMotion()
    acquisition: AcquisitionSpec
    floor: float = Field(0.05, gt=0.0, lt=1.0, description="rotor-angle rejection floor")

    @model_validator(mode="after")
    def _bar(self):
        if self.obstacle.kind != "bar":
            raise ValueError("rotor scenario needs a bar obstacle")
        return self


class TrackScenario(_Strict):
    beam: BeamSpec = BeamSpec(width=2.84e-3)
    obstacle: ObstacleSpec = ObstacleSpec(kind="disk", diameter=1.00e-3, diffraction_scale=1.35)
    motion: TrackMotion = TrackMotion()
    acquisition: AcquisitionSpec
    tracking: TrackingSpec = TrackingSpec()

    @model_validator(mode="after")
    def _geometry(self):
        m, t = self.motion, self.tracking
        half = t.lut_half_range * self.beam.width
        if t.lut_half_range > self.beam.grid_span:
            raise ValueError("tracking.lut_half_range exceeds the beam grid")
        if m.step > 2.0 * half:
            raise ValueError(f"motion.step {m.step:g} m exceeds the LUT extent {2 * half:g} m")
        if t.lut_step > 2.0 * half:
            raise ValueError(f"tracking.lut_step {t.lut_step:g} m exceeds the LUT extent")
        for name in ("x_start", "x_stop", "y"):
            v = getattr(m, name)
            if abs(v) > half + 1e-12:
                raise ValueError(f"motion.{name} lies outside the LUT bounds +-{half:g} m")
            if abs(v / m.step - round(v / m.step)) > 1e-6:
                raise ValueError(f"motion.{name} must be an integer multiple of motion.step")
        if m.x_stop < m.x_start:
            raise ValueError("motion.x_stop must not be below motion.x_start")
        return self


class KnifeScenario(_Strict):
    beam: BeamSpec = BeamSpec(width=2.0e-6)
    motion: KnifeMotion = KnifeMotion()
    acquisition: AcquisitionSpec
    trigger: TriggerSpec = TriggerSpec()


SCENARIOS = {"rotor": RotorScenario, "track": TrackScenario, "knife": KnifeScenario}

#: Acquisition settings used where a config leaves them out. The seed has no default.
ACQUISITION_DEFAULTS = {
    "rotor": {"sample_period": 250e-12, "window": 200e-9},
    "track": {"sample_period": 50e-12, "window": 250e-12},
    "knife": {"sample_period": 100e-12, "window": 100e-12},
}


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_scenario(kind, data=None, seed=None):
    """Validate a scenario config dict; ``seed`` (if given) overrides ``acquisition.seed``.

    Raises :class:`pydantic.ValidationError` with field paths on invalid input.
    """
    data = _merge({"acquisition": ACQUISITION_DEFAULTS[kind]}, data or {})
    if seed is not None:
        data["acquisition"] = dict(data["acquisition"], seed=seed)
    return SCENARIOS[kind].model_validate(data)


def config_digest(cfg):
    text = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def provenance(cfg, seed):
    return [f"vectorsense {__version__}", f"config_sha256 {config_digest(cfg)}", f"seed {seed}"]


def build_field(spec):
    geom = beam.GridGeometry.centered(spec.width, spec.grid_n, spec.grid_span)
    waist = beam.calibrate_waist(spec.width, spec.kind, spec.wavelength, geom)
    if spec.asymmetry:
        return beam.imperfect_radial_mode(waist, spec.wavelength, 0.0, geom, spec.asymmetry,
                                          spec.asymmetry_seed)
    return beam.build_mode(spec.kind, waist, spec.wavelength, 0.0, geom)


def _stepped(poses, samples_per_pose, sample_period):
    """Zero-order-hold trajectory; knot times reuse the sample clock's arithmetic."""
    times = tuple(float(k * samples_per_pose * sample_period) for k in range(len(poses) + 1))
    return obstruction.Trajectory(times, tuple(poses) + (poses[-1],), "step")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _wrap_half_turn(a):
    """Angle difference folded to [-pi/2, pi/2)."""
    return (a + math.pi / 2) % math.pi - math.pi / 2


# -- rotor ------------------------------------------------------------------------------

@dataclass
class RotorResult:
    times: np.ndarray
    theta_true: np.ndarray
    theta_hat: np.ndarray
    stokes: list
    amplitude: float
    radius_spread: float
    mean_abs_error: float


def run_rotor(cfg, out_dir=None, threads=1):
    acq = cfg.acquisition
    field = build_field(cfg.beam)
    obst = cfg.obstacle.build()
    n = cfg.motion.n_poses
    thetas = cfg.motion.start_angle + 2.0 * math.pi * np.arange(n) / n
    poses = [obstruction.Pose(0.0, 0.0, float(t)) for t in thetas]
    spw = acq.samples_per_window
    traj = _stepped(poses, spw, acq.sample_period)
    trace = sensing.synthesize(field, traj, obst, acq.build_channels(), acq.sample_period,
                               n * spw * acq.sample_period, acq.seed, 0.0, threads)
    starts = np.arange(n) * spw * acq.sample_period
    win = sensing.integrate_windows(trace, starts, acq.window)
    stokes = [polarimetry.stokes_from_intensities(*w) for w in win]
    # Amplitude from the first half turn: the (s1, s2) locus closes every pi.
    amp = tracking.rotor_amplitude(stokes[:max(1, n // 2)])
    theta_hat = np.full(n, math.nan)
    for k, sv in enumerate(stokes):
        try:
            theta_hat[k] = tracking.rotor_angle(sv, amp, cfg.floor)
        except tracking.DegenerateError:
            pass
    err = np.abs([_wrap_half_turn(h - t) for h, t in zip(theta_hat, thetas)])
    radii = np.hypot([s.s1 for s in stokes], [s.s2 for s in stokes])
    result = RotorResult(starts, thetas, theta_hat, stokes, amp,
                         float((radii.max() - radii.min()) / radii.mean()),
                         float(np.nanmean(err)) if np.isfinite(err).any() else math.nan)
    if out_dir is not None:
        out = Path(out_dir)
        head = provenance(cfg, acq.seed)
        polarimetry.write_stokes_csv(out / "stokes.csv", starts, stokes, head)
        with open(out / "angles.csv", "w") as fh:
            for line in head:
                fh.write(f"# {line}\n")
            fh.write("t,theta_true,theta_hat,abs_error\n")
            for t, a, b, e in zip(starts, thetas % math.pi, theta_hat, err):
                fh.write(f"{t!r},{float(a)!r},{float(b)!r},{float(e)!r}\n")
        _write_json(out / "summary.json", {
            "provenance": head, "n_poses": n,
            "mean_abs_error_rad": result.mean_abs_error,
            "mean_abs_error_deg": math.degrees(result.mean_abs_error),
            "undetermined_poses": int(np.isnan(theta_hat).sum()),
            "circle_radius": amp, "circle_radius_relative_spread": result.radius_spread})
    return result


# -- sphere tracking --------------------------------------------------------------------

def build_scenario_lut(cfg, field=None, threads=1, tomography=None):
    field = build_field(cfg.beam) if field is None and tomography is None else field
    source = tomography if tomography is not None else field
    return tracking.build_lut(source, cfg.obstacle.build(), cfg.tracking.lut_step,
                              cfg.tracking.lut_half_range * cfg.beam.width, threads)


def track_positions(motion):
    k0 = int(round(motion.x_start / motion.step))
    k1 = int(round(motion.x_stop / motion.step))
    ky = int(round(motion.y / motion.step))
    return np.arange(k0, k1 + 1) * motion.step, ky * motion.step


def clean_blocked(lut, xs, y):
    """Unobstructed minus obstructed s0 at each true position (noiseless forward model)."""
    idx = [lut.nearest_index(x, y) for x in xs]
    s0 = np.array([lut.expected[i][0] + lut.expected[i][1] for i in idx])
    return lut.open_power[0] + lut.open_power[1] - s0


def window_noise_for_snr(lut, xs, y, snr):
    """Per-channel window noise giving ``max blocked s0 / (sqrt(2) sigma) = snr``."""
    return float(clean_blocked(lut, xs, y).max() / (math.sqrt(2.0) * snr))


@dataclass
class TrackRun:
    times: np.ndarray
    points: list
    sigma: np.ndarray
    measurements: np.ndarray


def analyse_trace(trace, lut, window, tracking_spec):
    """Windowed four-channel means of a calibrated trace, tracked through ``lut``."""
    n_win = trace.n_samples // max(1, int(round(window / trace.sample_period)))
    if n_win < 1:
        raise ConfigurationError("trace shorter than one integration window")
    starts = trace.t0 + np.arange(n_win) * int(round(window / trace.sample_period)) \
        * trace.sample_period
    meas = sensing.integrate_windows(trace, starts, window)
    open_s0 = float(lut.open_power[0] + lut.open_power[1])
    sigma = np.maximum(sensing.window_sigma(trace, window), tracking_spec.sigma_floor * open_s0)
    fit = tracking.best_fit_chi2(lut, meas, sigma)
    if float(np.median(fit)) > MISMATCH_CHI2:
        raise ConfigurationError(
            f"trace does not fit the LUT (median best-cell chi2 {float(np.median(fit)):.3g} > "
            f"{MISMATCH_CHI2:g}); trace and LUT describe different beams or obstacles")
    points = tracking.track(lut, meas, sigma, starts, tracking_spec.half_plane,
                            tracking_spec.continuity_scale, s0_floor=tracking_spec.s0_floor)
    return TrackRun(starts, points, sigma, meas)


#: Median over windows of the best LUT cell's chi-square (four channels) above which a
#: trace is rejected as incompatible with the table. Matching data gives about 1-2.
MISMATCH_CHI2 = 100.0


def write_track_outputs(out, run, head):
    tracking.write_track_csv(Path(out) / "track.csv", run.points, head)


def run_track(cfg, out_dir=None, threads=1, lut=None, field=None):
    """Synthesize a sphere transit, then track it from the written (or in-memory) trace."""
    acq, m = cfg.acquisition, cfg.motion
    field = build_field(cfg.beam) if field is None else field
    lut = build_scenario_lut(cfg, field, threads) if lut is None else lut
    xs, y = track_positions(m)
    spw = acq.samples_per_window
    sigma_sample = acq.noise_sigma
    snr = None
    if acq.target_snr is not None:
        sigma_sample = window_noise_for_snr(lut, xs, y, acq.target_snr) * math.sqrt(spw)
    poses = [obstruction.Pose(float(x), float(y), cfg.obstacle.theta) for x in xs]
    traj = _stepped(poses, spw, acq.sample_period)
    channels = acq.build_channels(sigma_sample)
    trace = sensing.synthesize(field, traj, cfg.obstacle.build(), channels, acq.sample_period,
                               len(xs) * spw * acq.sample_period, acq.seed, 0.0, threads)
    head = provenance(cfg, acq.seed)
    if out_dir is not None:
        out = Path(out_dir)
        sensing.export_traces(out / "trace.csv", trace, head)
        sensing.save_calibration(out / "calibration.json", channels)
        tracking.save_lut(out / "lut.vsa", lut, {"config_sha256": config_digest(cfg)})
        trace = sensing.ingest(out / "trace.csv", out / "calibration.json")
        lut = tracking.load_lut(out / "lut.vsa")
    run = analyse_trace(trace.calibrated(), lut, acq.window, cfg.tracking)
    blocked = clean_blocked(lut, xs, y)
    high = blocked >= 0.5 * blocked.max()
    sigma_w = float(run.sigma.max())
    snr = float(blocked.max() / (math.sqrt(2.0) * sigma_w))
    errors = np.array([math.hypot(p.x - x, p.y - y) if p.reliable else math.nan
                       for p, x in zip(run.points, xs)])
    truth = [lut.nearest_index(x, y) for x in xs]
    inside = np.array([p.contains(*c) for p, c in zip(run.points, truth)])
    summary = {
        "provenance": head, "steps": len(xs),
        "reliable_steps": int(sum(p.reliable for p in run.points)),
        "degenerate_steps": int(sum(p.degenerate for p in run.points)),
        "max_error_m": float(np.nanmax(errors)) if np.isfinite(errors).any() else None,
        "max_error_cells": (float(np.nanmax(errors)) / lut.step
                            if np.isfinite(errors).any() else None),
        "noise_sigma_per_sample": [float(c.noise_sigma / c.gain) for c in channels],
        "window_sigma": [float(s) for s in run.sigma],
        "snr_high_intensity": snr,
        "high_intensity_steps": int(high.sum()),
        "high_intensity_coverage": float(inside[high].mean()),
        "tracking": cfg.tracking.model_dump(mode="json"),
        "window": acq.window,
    }
    if out_dir is not None:
        write_track_outputs(out_dir, run, head)
        with open(Path(out_dir) / "truth.csv", "w") as fh:
            for line in head:
                fh.write(f"# {line}\n")
            fh.write("t,x0,y0\n")
            for t, x in zip(run.times, xs):
                fh.write(f"{float(t)!r},{float(x)!r},{float(y)!r}\n")
        _write_json(Path(out_dir) / "summary.json", summary)
    return run, summary, errors, inside, high


# -- knife edge -------------------------------------------------------------------------

def run_knife(cfg, out_dir=None, threads=1):
    acq, m = cfg.acquisition, cfg.motion
    field = build_field(cfg.beam)
    width = cfg.beam.width
    n_hat = (math.cos(m.normal), math.sin(m.normal))
    start = m.start_offset * width
    if m.duration is not None:
        duration = m.duration
    elif m.speed > 0:
        duration = 2.0 * start / m.speed
    else:
        duration = 200e-9
    travel = m.speed * duration
    p0 = obstruction.Pose(start * n_hat[0], start * n_hat[1], m.normal)
    p1 = obstruction.Pose((start - travel) * n_hat[0], (start - travel) * n_hat[1], m.normal)
    traj = obstruction.Trajectory((0.0, duration), (p0, p1))
    knife = obstruction.Obstacle(obstruction.HalfPlane(), p0)
    channels = acq.build_channels()
    trace = sensing.synthesize(field, traj, knife, channels, acq.sample_period, duration,
                               acq.seed, 0.0, threads)
    cal = trace.calibrated()
    events = tracking.trigger(cal, cfg.trigger.threshold_fraction, cfg.trigger.hysteresis,
                              cfg.trigger.settle_time)
    series = [polarimetry.stokes_from_intensities(*cal.samples[:, k])
              for k in range(cal.n_samples)]
    direction = None
    if events:
        try:
            direction = tracking.knife_direction(series)
        except DetectionError:
            direction = None
    head = provenance(cfg, acq.seed)
    report = {
        "provenance": head,
        "events": [{"t_start": e.t_start, "t_end": e.t_end, "duration": e.duration,
                    "truncated": e.truncated} for e in events],
        "direction": None if direction is None else {
            "axis": direction.axis, "motion_angle_rad": direction.motion_angle,
            "s1_energy": direction.s1_energy, "s2_energy": direction.s2_energy,
            "low_confidence": direction.low_confidence,
            "ambiguous_180": direction.ambiguous_180},
    }
    if out_dir is not None:
        out = Path(out_dir)
        sensing.export_traces(out / "trace.csv", trace, head)
        polarimetry.write_stokes_csv(out / "stokes.csv", cal.times,
                                     polarimetry.normalize(series), head)
        _write_json(out / "events.json", report)
    return trace, events, direction, report
