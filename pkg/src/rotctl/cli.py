"""``rotctl`` command line: simulate, sweep, fit-circle.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 partial sweep failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import scenario as scen
from .observer import ObserverError, estimate_contraction, pratt_circle_fit
from .rod import reconstruct_centerline
from .sim import NUMERICAL_FAILURE, SimError, SimResult, convergence_metrics, run_closed_loop

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 2, 3, 4
TIMESERIES_COLUMNS = ("t_s", "err_norm_rad", "p1_pa", "p2_pa", "qp_residual", "energy_j", "status")
SWEEP_COLUMNS = ("parameter", "value", "seed", "status", "convergence_time_s", "overshoot_rad",
                 "decay_rate_per_s", "r_squared", "final_err_norm_rad", "final_p1_pa", "final_p2_pa")


def _num(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if not np.isfinite(x):
        return "nan" if np.isnan(x) else ("inf" if x > 0 else "-inf")
    return format(x, ".9e")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def timeseries_rows(result: SimResult):
    n = len(result.t)
    p = np.zeros((n, 2))
    k = min(2, result.pressures.shape[1]) if result.pressures.size else 0
    if k:
        p[:, :k] = result.pressures[:, :k]
    for i in range(n):
        status = result.status if i == n - 1 else "running"
        yield [_num(result.t[i]), _num(result.err_norm[i]), _num(p[i, 0]), _num(p[i, 1]),
               _num(result.residual[i]), _num(result.energy[i]), status]


def summarize(result: SimResult, name: str, seed: int) -> dict:
    summary = {"scenario": name, "seed": seed, "status": result.status,
               "convergence_time": result.convergence_time, "overshoot": None,
               "decay_rate": None, "r_squared": None, "stop_tol": result.stop_tol,
               "final_err_norm": float(result.err_norm[-1]) if len(result.err_norm) else None,
               "final_pressures": result.pressures[-1].tolist() if len(result.pressures) else [],
               "failure": result.failure}
    if len(result.t) >= 10:
        m = convergence_metrics(result)
        summary.update(overshoot=m.overshoot,
                       decay_rate=m.decay_rate if np.isfinite(m.decay_rate) else None,
                       r_squared=m.r_squared if np.isfinite(m.r_squared) else None)
    if not np.isfinite(summary["stop_tol"]):
        summary["stop_tol"] = None
    return summary


def write_outputs(out_dir: Path, config: dict, result: SimResult, name: str, seed: int) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "timeseries.csv", TIMESERIES_COLUMNS, timeseries_rows(result))
    params = scen.RodParams(**config["rod"])
    theta = result.final_state.theta
    pos = reconstruct_centerline(theta, params).positions
    rows = ([_num(s), _num(y), _num(z), _num(th)] for s, (y, z), th in zip(params.grid(), pos, theta))
    _write_csv(out_dir / "final_shape.csv", ("s_m", "y_m", "z_m", "theta_rad"), rows)
    summary = summarize(result, name, seed)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out_dir / "scenario.toml").write_text(scen.dumps(config))
    return summary


def _load_config(path: str, overrides: Sequence[str], seed: Optional[int]) -> dict:
    config = scen.load_any(path)
    for item in overrides or ():
        config = scen.set_override(config, item)
    if seed is not None:
        config = scen.set_override(config, f"observer.seed={int(seed)}")
    return config


def _default_out() -> Path:
    return Path(os.environ.get("ROTCTL_OUT_DIR", "rotctl_out"))


def _err(msg: str) -> None:
    print(f"rotctl: {msg}", file=sys.stderr)


def cmd_simulate(args) -> int:
    try:
        config = _load_config(args.scenario, args.override, args.seed)
    except scen.ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    if args.dump_config:
        sys.stdout.write(scen.dumps(config))
        return EXIT_OK
    name = Path(args.scenario).stem
    out_dir = Path(args.out_dir) if args.out_dir else _default_out()
    try:
        result = run_closed_loop(scen.build(config, name=name))
    except (SimError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    summary = write_outputs(out_dir, config, result, name, config["observer"]["seed"])
    if args.verbose:
        for t, status, iters in result.ticks:
            print(f"tick t={t:.3f} qp={status} iterations={iters}", file=sys.stderr)
    print(json.dumps(summary))
    return EXIT_NUMERICAL if result.status == NUMERICAL_FAILURE else EXIT_OK


def _sweep_job(job):
    index, config, parameter, value, seed, out_dir, name = job
    try:
        cfg = scen.set_override(config, f"{parameter}={value!r}" if isinstance(value, str) else f"{parameter}={value}")
        cfg = scen.set_override(cfg, f"observer.seed={seed}")
        result = run_closed_loop(scen.build(cfg, name=name))
        run_dir = Path(out_dir) / f"run_{index:03d}"
        summary = write_outputs(run_dir, cfg, result, name, seed)
        return summary
    except Exception as exc:  # recorded per run; the batch continues
        return {"status": "error", "failure": f"{type(exc).__name__}: {exc}", "seed": seed,
                "convergence_time": None, "overshoot": None, "decay_rate": None, "r_squared": None,
                "final_err_norm": None, "final_pressures": []}


def _parse_values(raw: Sequence[str]) -> list:
    values = []
    for chunk in raw:
        for item in chunk.split(","):
            item = item.strip()
            if not item:
                continue
            try:
                values.append(float(item) if any(c in item for c in ".eE") else int(item))
            except ValueError:
                values.append(item)
    return values


def cmd_sweep(args) -> int:
    try:
        config = _load_config(args.scenario, args.override, None)
        values = _parse_values(args.values)
        if not values:
            raise scen.ConfigError("no sweep values given")
        for value in values:
            scen.set_override(config, f"{args.parameter}={value}")
    except scen.ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    if args.seeds < 1:
        _err("--seeds must be >= 1")
        return EXIT_CONFIG
    base_seed = config["observer"]["seed"] if args.seed is None else args.seed
    out_dir = Path(args.out_dir) if args.out_dir else _default_out()
    out_dir.mkdir(parents=True, exist_ok=True)
    name = Path(args.scenario).stem
    jobs = []
    for value in values:
        for k in range(args.seeds):
            jobs.append((len(jobs), config, args.parameter, value, base_seed + k, str(out_dir), name))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_sweep_job, jobs))
    else:
        summaries = [_sweep_job(job) for job in jobs]

    rows, failed = [], 0
    for job, s in zip(jobs, summaries):
        if s["status"] in ("error", NUMERICAL_FAILURE):
            failed += 1
        p = list(s.get("final_pressures") or []) + [None, None]
        rows.append([args.parameter, job[3], job[4], s["status"], _num(s["convergence_time"]),
                     _num(s["overshoot"]), _num(s["decay_rate"]), _num(s["r_squared"]),
                     _num(s["final_err_norm"]), _num(p[0]), _num(p[1])])
    _write_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)

    agg = []
    for value in values:
        times = [s["convergence_time"] for j, s in zip(jobs, summaries)
                 if j[3] == value and s["convergence_time"] is not None]
        runs = sum(1 for j in jobs if j[3] == value)
        mean = float(np.mean(times)) if times else None
        std = float(np.std(times)) if times else None
        agg.append([args.parameter, value, runs, len(times), _num(mean), _num(std)])
    _write_csv(out_dir / "sweep_summary.csv",
               ("parameter", "value", "runs", "converged", "mean_convergence_time_s", "std_convergence_time_s"), agg)
    print(json.dumps({"runs": len(jobs), "failed": failed, "out_dir": str(out_dir)}))
    return EXIT_PARTIAL if failed else EXIT_OK


def read_points(path: str) -> np.ndarray:
    text = sys.stdin.read() if path == "-" else Path(path).read_text()
    rows = []
    for record in csv.reader(io.StringIO(text)):
        if not record or record[0].strip().startswith("#"):
            continue
        try:
            rows.append([float(record[0]), float(record[1])])
        except (ValueError, IndexError):
            if rows:
                raise ObserverError(f"bad row {record!r}") from None
            # header line
    return np.array(rows, dtype=float).reshape(-1, 2)


def bend_sign(points: np.ndarray) -> float:
    """Turning direction of an ordered polyline, in the rod's angle convention.

    The tangent is ``(sin theta, cos theta)`` in (y, z), so a growing angle
    turns chords clockwise in the (y, z) plane.
    """
    chords = np.diff(points, axis=0)
    cross = chords[:-1, 0] * chords[1:, 1] - chords[:-1, 1] * chords[1:, 0]
    return float(-np.sign(np.sum(cross)))


def cmd_fit_circle(args) -> int:
    try:
        points = read_points(args.points_csv)
        fit = pratt_circle_fit(points, args.length)
    except (OSError, ObserverError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    bank = scen._bank(scen.merge({"actuators": {"moment_arms": [args.moment_arm, -args.moment_arm],
                                                "pressures": [0.0, 0.0],
                                                "braid_angle_deg": args.braid_angle_deg}}))
    sign = bend_sign(points)
    if fit.straight or sign == 0:
        eps = np.zeros(bank.n_act)
    else:
        eps = estimate_contraction(fit.radius, bank.actuators, sign)
    out = {"center": None if fit.straight and not np.all(np.isfinite(fit.center)) else fit.center.tolist(),
           "radius": fit.radius if np.isfinite(fit.radius) else None,
           "curvature": 0.0 if fit.straight else sign / fit.radius,
           "rms_residual": fit.rms_residual, "straight": bool(fit.straight),
           "bend_sign": sign, "eps": eps.tolist()}
    print(json.dumps(out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rotctl", description="Soft-rod shape control workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("scenario", help="scenario TOML file or built-in name (%s)" % ", ".join(scen.BUILTIN))
        p.add_argument("--out-dir", help="output directory (default $ROTCTL_OUT_DIR or ./rotctl_out)")
        p.add_argument("--seed", type=int, help="observer seed")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a scenario field (repeatable)")

    p = sub.add_parser("simulate", help="run one closed-loop scenario")
    common(p)
    p.add_argument("--dump-config", action="store_true", help="print the validated scenario and exit")
    p.add_argument("--verbose", action="store_true", help="log every control tick to stderr")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a scenario over values of one field")
    common(p)
    p.add_argument("--parameter", required=True, help="section.key of a scalar field")
    p.add_argument("--values", nargs="+", default=[], help="values (space or comma separated)")
    p.add_argument("--seeds", type=int, default=1, help="runs per value, with consecutive seeds")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit-circle", help="Pratt circle fit of (y, z) points and contraction estimate")
    p.add_argument("points_csv", help="CSV with y,z columns ('-' for stdin)")
    p.add_argument("--moment-arm", type=float, default=0.018)
    p.add_argument("--braid-angle-deg", type=float, default=45.0)
    p.add_argument("--length", type=float, default=None, help="reference length for the straightness test")
    p.set_defaults(func=cmd_fit_circle)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
