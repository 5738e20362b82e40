"""``spadlab`` command line.

Every subcommand writes a JSON summary (sorted keys, no timestamps) to the
output directory and echoes it on stdout. The output directory defaults to
``$SPADLAB_OUT`` or the current directory.

Exit codes: 0 ok, 2 input error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, NumericError
from .fitting import fit_trap_decay, find_fit_start, fwhm
from .histograms import (
    DEFAULT_NBINS, DEFAULT_RATIO, DEFAULT_T0_S, DEFAULT_WINDOW_S,
    long_time_histogram, make_exp_grid, summarize_afterpulsing,
)
from .qkd import PRESETS, LinkScenario, evaluate_scenario, sweep_loss
from .radiometry import (
    BlackbodyQuery, EfficiencyInput, blackbody_photon_rate, breakdown_voltage,
    detection_efficiency, disc_area, power_for_photon_rate,
)
from .simulate import (
    DetectorModel, PulseTrain, duration_for_events, expected_afterpulse_probability,
    simulate_dark, simulate_illuminated,
)
from .timetag import DEFAULT_TICK_SECONDS, FORMATS, load_tags, save_tags, stream_stats

ENV_OUT = "SPADLAB_OUT"

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------- output helpers

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(ENV_OUT) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def svg_logx_plot(x, y, *, title: str = "", xlabel: str = "", ylabel: str = "",
                  logy: bool = True, width: int = 640, height: int = 400) -> str:
    """Minimal SVG line plot with a logarithmic x axis (and optionally y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = (x > 0) & np.isfinite(y) & ((y > 0) if logy else True)
    x, y = x[keep], y[keep]
    ml, mr, mt, mb = 70, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    if x.size:
        lx = np.log10(x)
        vy = np.log10(y) if logy else y
        x0, x1 = math.floor(lx.min()), math.ceil(lx.max())
        y0, y1 = float(vy.min()), float(vy.max())
        if logy:
            y0, y1 = math.floor(y0), math.ceil(y1)
        if x1 == x0:
            x1 = x0 + 1
        if y1 == y0:
            y1 = y0 + 1

        def px(v):
            return ml + (v - x0) / (x1 - x0) * pw

        def py(v):
            return mt + ph - (v - y0) / (y1 - y0) * ph

        for d in range(x0, x1 + 1):
            parts.append(f'<line x1="{px(d):.1f}" y1="{mt + ph}" x2="{px(d):.1f}" y2="{mt + ph + 4}" stroke="black"/>')
            parts.append(f'<text x="{px(d):.1f}" y="{mt + ph + 16}" text-anchor="middle">1e{d}</text>')
        if logy:
            for d in range(int(y0), int(y1) + 1):
                parts.append(f'<text x="{ml - 6}" y="{py(d) + 4:.1f}" text-anchor="end">1e{d}</text>')
        else:
            for v in np.linspace(y0, y1, 5):
                parts.append(f'<text x="{ml - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(lx, vy))
        parts.append(f'<polyline fill="none" stroke="#1f4e99" stroke-width="1.2" points="{pts}"/>')
    if title:
        parts.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>')
    if xlabel:
        parts.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>')
    if ylabel:
        parts.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
                     f'transform="rotate(-90 14 {mt + ph / 2})">{ylabel}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _grid_from_args(args):
    return make_exp_grid(args.t0, args.ratio, args.nbins)


def _load_stream(args):
    return load_tags(Path(args.input), args.format, args.tick)


def _histogram(args):
    stream = _load_stream(args)
    hist = long_time_histogram(stream, args.l, _grid_from_args(args), workers=args.workers)
    return stream, hist


# ---------------------------------------------------------------- subcommands

def cmd_ingest(args):
    stream = _load_stream(args)
    spans = None
    if args.session_seconds:
        spans = [float(v) for v in args.session_seconds.split(",")]
    st = stream_stats(stream, spans)
    out = _out_dir(args)
    result = {"input": str(args.input), "format": args.format,
              "tick_seconds": stream.tick_seconds, "meta": stream.meta, **st.to_dict()}
    if args.convert:
        target_fmt = "csv-seconds" if args.format == "binary-ticks" else "binary-ticks"
        save_tags(stream, Path(args.convert), target_fmt)
        result["converted"] = {"path": str(args.convert), "format": target_fmt}
    return "ingest", result, out


def cmd_afterpulse(args):
    stream, hist = _histogram(args)
    summary = summarize_afterpulsing(hist, args.tail_fraction)
    out = _out_dir(args)
    _write(out / "histogram.csv", hist.to_csv())
    result = {
        "input": str(args.input),
        "n_tags": len(stream),
        "n_starts": int(hist.n_starts),
        "total_pairs": int(hist.total_pairs),
        "grid": hist.grid.to_dict(),
        "window_l": args.l,
        **summary.to_dict(),
    }
    if args.svg:
        _write(out / "afterpulse.svg", svg_logx_plot(
            hist.centers, hist.rate_cps, title="Conditional count rate",
            xlabel="time after count (s)", ylabel="rate (cps)"))
    return "afterpulse", result, out


def cmd_fit(args):
    stream, hist = _histogram(args)
    if args.start is not None:
        start, strict = args.start, True
    else:
        start, strict = find_fit_start(hist.rate_cps)
    fit = fit_trap_decay(hist, start, args.max_components, n_components=args.components)
    out = _out_dir(args)
    result = {"input": str(args.input), "fit_start_strict": strict, **fit.to_dict()}
    if args.svg:
        _write(out / "fit.svg", svg_logx_plot(
            hist.centers, hist.rate_cps, title="Conditional count rate",
            xlabel="time after count (s)", ylabel="rate (cps)"))
    return "fit", result, out


def cmd_simulate(args):
    model = DetectorModel.resolve(args.model)
    if args.duration is None and args.events is None:
        raise InputError("give --duration or --events")
    duration = args.duration if args.duration is not None else duration_for_events(model, args.events)
    if args.pulse_rate:
        mu = args.mu
        if mu is None:
            if args.photon_rate is None:
                raise InputError("pulsed simulation needs --mu or --photon-rate")
            mu = args.photon_rate / args.pulse_rate
        pulses = PulseTrain(args.pulse_rate, mu, duration, args.wavelength)
        stream = simulate_illuminated(model, pulses, args.seed, args.tick)
    else:
        stream = simulate_dark(model, duration, args.seed, args.tick)
    out = _out_dir(args)
    ext = "bin" if args.out_format == "binary-ticks" else "csv"
    tag_path = out / f"{args.name}.{ext}"
    save_tags(stream, tag_path, args.out_format)
    result = {
        "model": model.to_dict(),
        "seed": args.seed,
        "duration_s": duration,
        "n_tags": len(stream),
        "tick_seconds": stream.tick_seconds,
        "tags_path": tag_path.name,
        "tags_format": args.out_format,
        "expected_afterpulse_probability": expected_afterpulse_probability(model),
    }
    return "simulate", result, out


def _read_column(path: Path) -> np.ndarray:
    vals = []
    with open(path, newline="") as fh:
        for ln, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                vals.append(float(row[0]))
            except ValueError:
                if ln == 1:
                    continue  # header
                raise InputError(f"{path}: malformed number {row[0]!r} on line {ln}") from None
    return np.array(vals)


def cmd_jitter(args):
    if args.input:
        delays = _read_column(Path(args.input))
        source = {"input": str(args.input)}
    else:
        if args.sigma is None:
            raise InputError("give --in with delays or --sigma to draw Gaussian delays")
        rng = np.random.default_rng(args.seed)
        delays = rng.normal(0.0, args.sigma, args.n)
        source = {"sigma_s": args.sigma, "n": args.n, "seed": args.seed}
    res = fwhm(delays, bin_width=args.bin_width)
    return "jitter", {**source, "bin_width_s": args.bin_width, **res.to_dict()}, _out_dir(args)


def cmd_efficiency(args):
    if (args.power is None) == (args.photon_rate is None):
        raise InputError("give exactly one of --power and --photon-rate")
    power = args.power if args.power is not None else power_for_photon_rate(args.photon_rate, args.wavelength)
    inp = EfficiencyInput(args.detected, args.dcr, power, args.wavelength, args.pulse_rate or 0.0)
    res = detection_efficiency(inp)
    result = {"detected_rate_cps": args.detected, "dcr_cps": args.dcr, "laser_power_w": power,
              "wavelength_m": args.wavelength, "pulse_rate_hz": args.pulse_rate or 0.0, **res.to_dict()}
    return "efficiency", result, _out_dir(args)


def _read_points(path: Path):
    pts = []
    with open(path, newline="") as fh:
        for ln, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                pts.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if ln == 1:
                    continue
                raise InputError(f"{path}: malformed point on line {ln}") from None
    return pts


def cmd_breakdown(args):
    policy = args.policy
    if args.include:
        policy = [int(v) for v in args.include.split(",")]
    res = breakdown_voltage(_read_points(Path(args.input)), policy)
    return "breakdown", {"input": str(args.input), **res.to_dict()}, _out_dir(args)


def cmd_blackbody(args):
    area = args.area if args.area is not None else disc_area(args.diameter)
    q = BlackbodyQuery(args.temperature, args.cutoff, area)
    rate = blackbody_photon_rate(q)
    result = {"temperature_k": q.temperature_k, "cutoff_wavelength_m": q.cutoff_wavelength_m,
              "aperture_area_m2": area, "photons_per_second": rate, "photons_per_hour": rate * 3600}
    return "blackbody", result, _out_dir(args)


def _parse_sweep(text: str):
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise InputError(f"--sweep expects lo:hi:step, got {text!r}") from None
    if step <= 0 or hi <= lo:
        raise InputError("--sweep needs hi > lo and step > 0")
    return lo, hi, int(round((hi - lo) / step)) + 1


def cmd_keyrate(args):
    if args.scenario:
        with open(args.scenario) as fh:
            s = LinkScenario.from_dict(json.load(fh))
    else:
        s = LinkScenario.preset(args.preset)
    over = {}
    if args.dcr is not None:
        over["dcr_cps_per_station"] = args.dcr
    if args.ed is not None:
        over["intrinsic_error"] = args.ed
    if args.fec is not None:
        over["error_correction_inefficiency"] = args.fec
    if args.pair_rate is not None:
        over["pair_rate_cps"] = args.pair_rate
    if args.window is not None:
        over["coincidence_window_s"] = args.window
    if args.per_detector:
        over["dcr_per_detector"] = True
    if args.jitter_sigma is not None:
        over["jitter_sigma_s"] = args.jitter_sigma
    if args.loss is not None:
        vals = [float(v) for v in args.loss.split(",")]
        over["loss_db_per_link"] = tuple(vals * 2 if len(vals) == 1 else vals)
    s = s.replace(**over)
    out = _out_dir(args)
    result = {"scenario": s.to_dict(), "evaluation": evaluate_scenario(s).to_dict()}
    if args.sweep:
        lo, hi, steps = _parse_sweep(args.sweep)
        sw = sweep_loss(s, (lo, hi), steps)
        _write(out / "keyrate_curve.csv", sw.to_csv())
        result["cutoff_db"] = sw.cutoff_db
        result["sweep_flags"] = list(sw.flags)
        result["sweep"] = {"lo_db": lo, "hi_db": hi, "steps": steps}
    return "keyrate", result, out


# ---------------------------------------------------------------- parser

def _add_common_out(p):
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT} or .)")


def _add_tag_input(p):
    p.add_argument("--in", dest="input", required=True, help="time-tag file")
    p.add_argument("--format", choices=FORMATS, default="binary-ticks")
    p.add_argument("--tick", type=float, default=DEFAULT_TICK_SECONDS, help="tick duration in seconds")


def _add_grid(p):
    p.add_argument("--l", type=float, default=DEFAULT_WINDOW_S, help="correlation window (s)")
    p.add_argument("--t0", type=float, default=DEFAULT_T0_S, help="first bin width (s)")
    p.add_argument("--ratio", type=float, default=DEFAULT_RATIO, help="bin width ratio")
    p.add_argument("--nbins", type=int, default=DEFAULT_NBINS)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--svg", action="store_true", help="also write a log-x SVG plot")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spadlab", description="SPAD afterpulsing and link-budget analysis")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a tag file and report counts and rates")
    _add_tag_input(p)
    p.add_argument("--session-seconds", help="comma-separated measured session durations")
    p.add_argument("--convert", help="write the stream in the other format to this path")
    _add_common_out(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("afterpulse", help="long-time histogram, DCR, dead time, afterpulse probability")
    _add_tag_input(p)
    _add_grid(p)
    p.add_argument("--tail-fraction", type=float, default=0.5)
    _add_common_out(p)
    p.set_defaults(func=cmd_afterpulse)

    p = sub.add_parser("fit", help="fit trap decay to the long-time histogram")
    _add_tag_input(p)
    _add_grid(p)
    p.add_argument("--start", type=int, help="fit start bin (default: automatic)")
    p.add_argument("--max-components", type=int, default=4)
    p.add_argument("--components", type=int, help="fix the number of exponential components")
    _add_common_out(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="simulate a detector record")
    p.add_argument("--model", required=True, help="model JSON path or bundled name (e.g. table1_-60C)")
    p.add_argument("--duration", type=float, help="record length (s)")
    p.add_argument("--events", type=int, help="target number of events (sets the duration)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tick", type=float, default=DEFAULT_TICK_SECONDS)
    p.add_argument("--pulse-rate", type=float, help="laser repetition rate (Hz)")
    p.add_argument("--mu", type=float, help="mean photons per pulse")
    p.add_argument("--photon-rate", type=float, help="photons per second (sets mu)")
    p.add_argument("--wavelength", type=float, default=808e-9)
    p.add_argument("--out-format", choices=FORMATS, default="binary-ticks")
    p.add_argument("--name", default="simulated", help="base name of the tag file")
    _add_common_out(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("jitter", help="FWHM of a delay histogram")
    p.add_argument("--in", dest="input", help="CSV with one delay (s) per line")
    p.add_argument("--sigma", type=float, help="draw Gaussian delays with this sigma instead")
    p.add_argument("--n", type=int, default=10**6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bin-width", type=float, default=20e-12)
    _add_common_out(p)
    p.set_defaults(func=cmd_jitter)

    p = sub.add_parser("efficiency", help="detection efficiency from optical power")
    p.add_argument("--detected", type=float, required=True, help="detected rate (cps)")
    p.add_argument("--dcr", type=float, default=0.0)
    p.add_argument("--power", type=float, help="optical power at the detector (W)")
    p.add_argument("--photon-rate", type=float, help="photons per second instead of --power")
    p.add_argument("--wavelength", type=float, default=808e-9)
    p.add_argument("--pulse-rate", type=float, help="laser repetition rate (Hz)")
    _add_common_out(p)
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("breakdown", help="breakdown voltage by linear extrapolation")
    p.add_argument("--in", dest="input", required=True, help="CSV of bias_v,amplitude")
    p.add_argument("--policy", choices=("auto", "all"), default="auto")
    p.add_argument("--include", help="comma-separated point indices (overrides --policy)")
    _add_common_out(p)
    p.set_defaults(func=cmd_breakdown)

    p = sub.add_parser("blackbody", help="blackbody photon rate below a cutoff wavelength")
    p.add_argument("--temperature", type=float, default=293.0, help="K")
    p.add_argument("--cutoff", type=float, default=900e-9, help="m")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--diameter", type=float, default=500e-6, help="aperture diameter (m)")
    g.add_argument("--area", type=float, help="aperture area (m^2)")
    _add_common_out(p)
    p.set_defaults(func=cmd_blackbody)

    p = sub.add_parser("keyrate", help="entangled-pair link key rate and loss cutoff")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=PRESETS, default="geo-dual-downlink")
    g.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--dcr", type=float, help="dark counts per station (cps)")
    p.add_argument("--per-detector", action="store_true", help="treat --dcr as per detector")
    p.add_argument("--ed", type=float, help="intrinsic error rate")
    p.add_argument("--fec", type=float, help="error-correction inefficiency")
    p.add_argument("--pair-rate", type=float)
    p.add_argument("--window", type=float, help="coincidence window (s)")
    p.add_argument("--jitter-sigma", type=float, help="per-detector jitter for window acceptance")
    p.add_argument("--loss", help="per-link loss in dB: one value or two comma-separated")
    p.add_argument("--sweep", help="total loss sweep lo:hi:step in dB")
    _add_common_out(p)
    p.set_defaults(func=cmd_keyrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            name, result, out = args.func(args)
        notes = sorted({str(w.message) for w in caught})
        if notes:
            result["warnings"] = notes
        text = dumps(result)
        _write(out / f"{name}.json", text)
    except InputError as exc:
        print(f"spadlab {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"spadlab {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"spadlab {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
