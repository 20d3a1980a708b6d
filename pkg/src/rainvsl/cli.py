"""Command-line entry point: ``rainvsl {run,sweep,safety-table,calibrate}``.

Exit codes: 0 success, 1 invalid input, 2 runtime or numeric failure,
3 file I/O failure. Machine-readable output goes to files (and stdout for
``calibrate``); diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import spearmanr

from . import __version__
from .calibration import (CalibrationError, DetectorFormatError, fit_fundamental_diagram,
                          fit_rain_speed_density, read_detector_csv)
from .controller import write_plan_log
from .domain import (Drainage, RampGeometry, SafetyParams, ScenarioConfig, ScenarioError, _coerce,
                     _strict_keys, config_hash, load_scenario, reference_scenario)
from .metanet import write_trajectory_csv
from .microsim import run_simulation, write_event_log, write_station_csv
from .safety import NumericError, envelope_for_rain, mainline_safe_speed_closed_form
from .units import mm_per_h_to_mm_per_min

log = logging.getLogger("rainvsl")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
ENV_OUT = "RAINVSL_OUT"
ENV_JOBS = "RAINVSL_JOBS"
# reference sensitivity changes (percent vs compliance 0), reported beside measured ones
# reference sensitivity changes from field studies, reported beside measured ones
REFERENCE_TTT_CHANGE = {0.3: -2.66, 0.5: -5.21, 0.7: -7.17}
REFERENCE_TTD_CHANGE = {0.3: 4.90, 0.5: 7.07, 0.7: 9.48}
REFERENCE_SD_CHANGE = (-17.59, -23.78, -36.87)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    scenario: str
    mode: str
    seeds: list[int]
    out: str
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__
    config_hash: str = ""

    def write(self, out_dir: Path):
        missing = [a for a in self.artifacts if not (out_dir / a).exists()]
        if missing:
            raise RuntimeError(f"manifest lists missing artifacts {missing}")
        (out_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _out_dir(arg) -> Path:
    out = arg or os.environ.get(ENV_OUT)
    if not out:
        raise UsageError("--out is required (or set RAINVSL_OUT)")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _jobs(arg) -> int:
    raw = arg if arg is not None else os.environ.get(ENV_JOBS, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"jobs must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("jobs must be >= 1")
    return n


def _load(path) -> ScenarioConfig:
    return reference_scenario() if path is None else load_scenario(path)


def _metrics_csv(path, report):
    d = asdict(report)
    rows = [("ttt", d["ttt"]), ("ttd", d["ttd"]), ("sd", d["sd"]), ("adherence", d["adherence"]),
            ("n_station_samples", d["n_station_samples"])]
    rows += [(f"sd_lane{j + 1}", x) for j, x in enumerate(d["sd_lane"])]
    rows += [(k, d[k]) for k in ("spawned", "exited", "ramp_exits", "overspeed_exits",
                                 "present", "queued", "max_queue")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, f"{v:.10g}" if isinstance(v, float) else v])


def _mean_speed_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "segment", "lane", "mean_speed"])
        for c, seg_rows in enumerate(report.mean_speed):
            for i, lanes in enumerate(seg_rows):
                for j, v in enumerate(lanes):
                    w.writerow([c, i, j, "" if math.isnan(v) else f"{v:.6f}"])


def cmd_run(args) -> int:
    cfg = _load(args.scenario)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = _out_dir(args.out)
    res = run_simulation(cfg, args.mode)
    arts = []
    if args.format == "json":
        (out / "metrics.json").write_text(res.report.to_json() + "\n")
        arts.append("metrics.json")
    else:
        _metrics_csv(out / "metrics.csv", res.report)
        arts.append("metrics.csv")
    _mean_speed_csv(out / "mean_speed.csv", res.report)
    write_station_csv(out / "stations.csv", res.world)
    write_event_log(out / "events.log", res.world)
    write_trajectory_csv(out / "trajectory.csv", res.world.observed)
    arts += ["mean_speed.csv", "stations.csv", "events.log", "trajectory.csv"]
    if res.control is not None:
        write_plan_log(out / "plans.csv", res.control)
    else:
        _baseline_plan_log(out / "plans.csv", res.plans)
    arts.append("plans.csv")
    RunManifest(str(args.scenario or "<bundled>"), args.mode, [cfg.seed], str(out), arts,
                config_hash=config_hash(cfg)).write(out)
    log.info("run %s seed %d: TTT %.3f veh*h, TTD %.3f veh*km", args.mode, cfg.seed,
             res.report.ttt, res.report.ttd)
    return EXIT_OK


def _baseline_plan_log(path, plans):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "i", "j", "v_g", "a_o", "l_d", "v_entry", "v_ramp"])
        for p in plans:
            M, N = p.v_g.shape
            for i in range(M):
                for j in range(N):
                    w.writerow([p.cycle, i, j, f"{p.v_g[i, j]:.4f}", f"{p.a_o:.4f}",
                                f"{p.profile.length:.4f}", f"{p.v_entry:.4f}", f"{p.v_ramp:.4f}"])


def _sweep_point(job):
    cfg, gamma, seed = job
    rep = run_simulation(cfg.replace(compliance=gamma, seed=seed), "control", record_events=False).report
    return gamma, seed, rep.ttt, rep.ttd, tuple(rep.sd_lane)


def _parse_values(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--values: not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise UsageError("--values is empty")
    if any(not 0 <= v <= 1 for v in vals):
        raise UsageError("--values must lie in [0, 1]")
    return vals


def sweep_summary(rows, n_lanes):
    """Per-gamma means, rank correlations and percentage changes against the first gamma."""
    gammas = sorted({r[0] for r in rows})
    means = {}
    for g in gammas:
        sel = [r for r in rows if r[0] == g]
        means[g] = {"TTT": float(np.mean([r[2] for r in sel])), "TTD": float(np.mean([r[3] for r in sel])),
                    "SD": [float(np.mean([r[4][j] for r in sel])) for j in range(n_lanes)]}
    g0, g1 = gammas[0], gammas[-1]

    def pct(a, b):
        return 100.0 * (b - a) / a if a else float("nan")

    summary = {
        "gamma": gammas,
        "means": {f"{g:g}": m for g, m in means.items()},
        "ttt_change_pct": {f"{g:g}": pct(means[g0]["TTT"], means[g]["TTT"]) for g in gammas},
        "ttd_change_pct": {f"{g:g}": pct(means[g0]["TTD"], means[g]["TTD"]) for g in gammas},
        "sd_change_pct": [pct(means[g0]["SD"][j], means[g1]["SD"][j]) for j in range(n_lanes)],
        "reference_ttt_change_pct": {f"{g:g}": v for g, v in REFERENCE_TTT_CHANGE.items()},
        "reference_ttd_change_pct": {f"{g:g}": v for g, v in REFERENCE_TTD_CHANGE.items()},
        "reference_sd_change_pct": list(REFERENCE_SD_CHANGE),
    }
    if len(gammas) > 1:
        summary["spearman_ttt"] = float(spearmanr(gammas, [means[g]["TTT"] for g in gammas])[0])
        summary["spearman_ttd"] = float(spearmanr(gammas, [means[g]["TTD"] for g in gammas])[0])
    return summary


def run_sweep(cfg, values, seeds, jobs=1):
    grid = [(cfg, g, s) for g in values for s in range(1, seeds + 1)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_sweep_point, grid))
    return [_sweep_point(j) for j in grid]


def cmd_sweep(args) -> int:
    if args.param != "gamma":
        raise UsageError(f"unsupported sweep parameter {args.param!r}; only 'gamma' is available")
    values = _parse_values(args.values)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    jobs = _jobs(args.jobs)
    cfg = _load(args.scenario)
    out = _out_dir(args.out)
    rows = run_sweep(cfg, values, args.seeds, jobs)
    n = cfg.n_lanes
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "seed", "TTT", "TTD"] + [f"SD_lane{j + 1}" for j in range(n)])
        for g, s, ttt, ttd, sd in rows:
            w.writerow([f"{g:g}", s, f"{ttt:.10g}", f"{ttd:.10g}"] + [f"{x:.10g}" for x in sd])
    summary = sweep_summary(rows, n)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    RunManifest(str(args.scenario or "<bundled>"), "sweep", list(range(1, args.seeds + 1)), str(out),
                ["sweep.csv", "summary.json"], config_hash=config_hash(cfg)).write(out)
    return EXIT_OK


def _ramp_config(path) -> ScenarioConfig:
    """A full scenario, or a document with ``ramp`` plus optional ``drainage``/``safety``/``legal_limit``."""
    if path is None:
        return reference_scenario()
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ScenarioError(f"parse error: {e}") from None
    if isinstance(doc, dict) and "segments" in doc:
        return load_scenario(path)
    _strict_keys(doc, {"ramp", "drainage", "safety", "legal_limit"}, "<root>", required=("ramp",))
    base = reference_scenario()
    ramp = _coerce(RampGeometry, doc["ramp"], "ramp")
    drainage = _coerce(Drainage, doc["drainage"], "drainage") if "drainage" in doc else Drainage()
    safety = _coerce(SafetyParams, doc["safety"], "safety") if "safety" in doc else SafetyParams()
    segs = list(base.segments)
    k = base.ramp_index
    legal = float(doc.get("legal_limit", segs[k].legal_limit))
    segs[k] = dataclasses.replace(segs[k], ramp=ramp, drainage=drainage, legal_limit=legal)
    return base.replace(segments=tuple(segs), safety=safety)


def safety_table(cfg, rain_min, rain_max, steps):
    """Rows of (d, h, phi, L_v, V_max, V_r, a_max, closed-form main-line speed) with rainfall in mm/h on every segment."""
    if steps < 1:
        raise UsageError("--steps must be >= 1")
    if rain_min < 0 or rain_max < rain_min:
        raise UsageError("need 0 <= rain-min <= rain-max")
    ds = [rain_min] if steps == 1 else list(np.linspace(rain_min, rain_max, steps))
    k = cfg.ramp_index
    rows = []
    for d in ds:
        env = envelope_for_rain(cfg, [d] * len(cfg.segments))
        try:
            closed = mainline_safe_speed_closed_form(env.film[k], mm_per_h_to_mm_per_min(d))
        except (ValueError, NumericError):
            closed = float("nan")
        rows.append((float(d), env.film[k], env.phi[k], env.visibility[k], env.v_max[k],
                     env.v_ramp, env.a_max, closed))
    return rows


def cmd_safety_table(args) -> int:
    cfg = _ramp_config(args.ramp_config)
    rows = safety_table(cfg, args.rain_min, args.rain_max, args.steps)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d_mm_h", "h_mm", "phi", "L_v_m", "V_max_kmh", "V_r_kmh", "a_max", "closed_form_kmh"])
        for r in rows:
            w.writerow([f"{x:.6f}" if not math.isnan(x) else "nan" for x in r])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_calibrate(args) -> int:
    data = read_detector_csv(args.data)
    if args.target == "fd":
        fits = fit_fundamental_diagram(data)
        frag = {"fundamental_diagram": [
            {"segment": s, "lane": j, "free_flow_speed": m.v_f_, "critical_density": m.k_c_,
             "exponent": m.a_, "rms": m.rms_} for (s, j), m in fits.items()]}
    else:
        m = fit_rain_speed_density(data)
        frag = {"rain_model": {"A": m.A_, "B": m.B_, "C": m.C_}, "rms": m.rms_}
    frag["flagged_rows"] = data.flagged
    text = yaml.safe_dump(frag, sort_keys=False)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rainvsl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one scenario under baseline or guidance control")
    r.add_argument("--scenario", help="scenario YAML (default: bundled reference scenario)")
    r.add_argument("--mode", choices=("baseline", "control"), default="control")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--format", choices=("csv", "json"), default="json")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="compliance sweep over seeds")
    s.add_argument("--scenario")
    s.add_argument("--param", default="gamma")
    s.add_argument("--values", required=True, help="comma-separated list, e.g. 0,0.5,1")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--out")
    s.add_argument("--jobs")
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("safety-table", help="safe speeds against rainfall intensity")
    t.add_argument("--ramp-config")
    t.add_argument("--rain-min", type=float, default=0.0, help="mm/h")
    t.add_argument("--rain-max", type=float, default=60.0, help="mm/h")
    t.add_argument("--steps", type=int, default=13)
    t.add_argument("--out", help="CSV path (default: stdout)")
    t.set_defaults(func=cmd_safety_table)

    c = sub.add_parser("calibrate", help="fit model parameters from detector CSV")
    c.add_argument("--data", required=True)
    c.add_argument("--target", choices=("fd", "rain"), required=True)
    c.add_argument("--out", help="also write the YAML fragment here")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"rainvsl: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ScenarioError, DetectorFormatError) as e:
        print(f"rainvsl: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"rainvsl: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (CalibrationError, NumericError, ArithmeticError, RuntimeError, ValueError) as e:
        print(f"rainvsl: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
