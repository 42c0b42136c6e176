"""Command-line front end.

Exit codes: 0 success, 2 invalid configuration, 3 unreadable or corrupt input,
4 degenerate inference (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from pydantic import ValidationError

from . import __version__, scenarios, sensing, tracking
from .errors import (ConfigurationError, DegenerateError, DomainError, ParseError, RangeError)

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_DEGENERATE = 0, 2, 3, 4


class _Exit(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _read_config(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise _Exit(EXIT_CONFIG, f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise _Exit(EXIT_CONFIG, f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise _Exit(EXIT_CONFIG, f"{path}: config must be a JSON object")
    return data


def _format_validation(exc):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid configuration:\n  " + "\n  ".join(lines)


def _load(kind, args):
    try:
        return scenarios.load_scenario(kind, _read_config(args.config), args.seed)
    except ValidationError as exc:
        raise _Exit(EXIT_CONFIG, _format_validation(exc)) from None


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate_rotor(args):
    cfg = _load("rotor", args)
    out = _out_dir(args)
    res = scenarios.run_rotor(cfg, out, args.threads)
    print(f"mean |theta error| = {math.degrees(res.mean_abs_error):.4f} deg over "
          f"{len(res.theta_true)} poses; circle radius spread {res.radius_spread:.2e}")
    return EXIT_OK


def cmd_simulate_track(args):
    cfg = _load("track", args)
    out = _out_dir(args)
    run, summary, *_ = scenarios.run_track(cfg, out, args.threads)
    print(f"{summary['steps']} steps, max error {summary['max_error_cells']:.3g} cells, "
          f"high-intensity coverage {summary['high_intensity_coverage']:.3f}")
    if summary["degenerate_steps"]:
        print(f"warning: {summary['degenerate_steps']} steps have a two-island posterior",
              file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_simulate_knife(args):
    cfg = _load("knife", args)
    out = _out_dir(args)
    _, events, direction, _ = scenarios.run_knife(cfg, out, args.threads)
    for e in events:
        print(f"event {e.t_start * 1e9:.3f}-{e.t_end * 1e9:.3f} ns, "
              f"duration {e.duration * 1e9:.3f} ns")
    if not events:
        print("no events")
    if direction is not None:
        flag = " (low confidence)" if direction.low_confidence else ""
        print(f"motion axis {direction.axis}{flag}, sign ambiguous (180 deg)")
    return EXIT_OK


def cmd_lut_build(args):
    cfg = _load("track", args)
    tomo = tracking.load_tomography(args.tomography) if args.tomography else None
    out = _out_dir(args)
    lut = scenarios.build_scenario_lut(cfg, threads=args.threads, tomography=tomo)
    path = out / args.name
    tracking.save_lut(path, lut, {"config_sha256": scenarios.config_digest(cfg),
                                  "tool": f"vectorsense {__version__}"})
    print(f"wrote {path} ({lut.shape[0]}x{lut.shape[1]} cells, source {lut.source})")
    return EXIT_OK


def lut_report(lut):
    stokes = lut.stokes
    return {
        "grid": lut.grid_spec(),
        "shape": tracking.obstacle_to_dict(lut.obstacle),
        "source": lut.source,
        "source_hash": lut.source_hash,
        "extrema": {name: [float(stokes[..., k].min()), float(stokes[..., k].max())]
                    for k, name in enumerate(("s0", "s1", "s2"))},
        "symmetry_180_residual": lut.symmetry_residual(),
    }


def cmd_lut_inspect(args):
    lut = tracking.load_lut(args.lut)
    report = lut_report(lut)
    if args.json:
        print(json.dumps(report, indent=1, sort_keys=True))
        return EXIT_OK
    g = report["grid"]
    print(f"grid x [{g['x_min']!r}, {g['x_max']!r}] n={g['nx']}, "
          f"y [{g['y_min']!r}, {g['y_max']!r}] n={g['ny']}, step {g['step']!r} m")
    print(f"shape {report['shape']}, source {lut.source}")
    for name, (lo, hi) in report["extrema"].items():
        print(f"{name}: [{lo:.6g}, {hi:.6g}]")
    res = report["symmetry_180_residual"]
    verdict = "symmetric" if res <= 1e-6 else "broken"
    print(f"180-degree symmetry residual {res:.3e} ({verdict})")
    return EXIT_OK


def cmd_track(args):
    data = _read_config(args.config)
    tracking_cfg = dict(data.get("tracking", {}))
    if args.half_plane is not _UNSET:
        tracking_cfg["half_plane"] = args.half_plane
    if args.continuity_scale is not _UNSET:
        tracking_cfg["continuity_scale"] = args.continuity_scale
    try:
        spec = scenarios.TrackingSpec.model_validate(tracking_cfg)
    except ValidationError as exc:
        raise _Exit(EXIT_CONFIG, _format_validation(exc)) from None
    window = args.window
    if window is None:
        window = data.get("acquisition", {}).get(
            "window", scenarios.ACQUISITION_DEFAULTS["track"]["window"])
    if not (isinstance(window, (int, float)) and window > 0):
        raise _Exit(EXIT_CONFIG, "acquisition.window must be a positive number")
    lut = tracking.load_lut(args.lut)
    trace = sensing.ingest(args.trace, args.calibration)
    run = scenarios.analyse_trace(trace, lut, window, spec)
    out = _out_dir(args)
    # The trace's provenance lines are carried through so outputs stay comparable.
    head = _trace_provenance(args.trace) or [f"vectorsense {__version__}"]
    scenarios.write_track_outputs(out, run, head)
    n_null = sum(not p.reliable for p in run.points)
    n_deg = sum(p.degenerate for p in run.points)
    print(f"{len(run.points)} windows tracked, {n_null} unreliable, {n_deg} degenerate")
    return EXIT_DEGENERATE if n_deg else EXIT_OK


_UNSET = object()


def _float_or_none(text):
    if text.lower() == "none":
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'none', got {text!r}") from None


def _trace_provenance(path):
    lines = []
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            lines.append(line[1:].strip())
    return lines


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="scenario JSON document")
    common.add_argument("--seed", type=int, help="override acquisition.seed")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads")

    parser = argparse.ArgumentParser(prog="vectorsense", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vectorsense {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-rotor", parents=[common], help="bar rotating about the axis")
    p.set_defaults(func=cmd_simulate_rotor)
    p = sub.add_parser("simulate-track", parents=[common], help="sphere crossing the beam")
    p.set_defaults(func=cmd_simulate_track)
    p = sub.add_parser("simulate-knife", parents=[common], help="knife edge transit")
    p.set_defaults(func=cmd_simulate_knife)

    lut = sub.add_parser("lut", help="build or inspect look-up tables")
    lut_sub = lut.add_subparsers(dest="lut_command", required=True)
    p = lut_sub.add_parser("build", parents=[common], help="tabulate a track scenario's LUT")
    p.add_argument("--tomography", metavar="PATH", help="measured tomography array file")
    p.add_argument("--name", default="lut.vsa", help="output file name inside --out")
    p.set_defaults(func=cmd_lut_build)
    p = lut_sub.add_parser("inspect", help="print grid, extrema and symmetry diagnostics")
    p.add_argument("lut", metavar="PATH")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_lut_inspect)

    p = sub.add_parser("track", parents=[common], help="track a recorded trace through a LUT")
    p.add_argument("--trace", required=True, metavar="PATH")
    p.add_argument("--lut", required=True, metavar="PATH")
    p.add_argument("--calibration", metavar="PATH", help="per-channel calibration JSON")
    p.add_argument("--window", type=float, help="integration window in seconds")
    p.add_argument("--half-plane", metavar="RAD|none", type=_float_or_none, default=_UNSET,
                   help="normal angle of the initial half-plane (radians)")
    p.add_argument("--continuity-scale", metavar="M|none", type=_float_or_none,
                   default=_UNSET, help="continuity prior scale (m)")
    p.set_defaults(func=cmd_track)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except _Exit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, DomainError, RangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DegenerateError as exc:
        print(f"warning: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
