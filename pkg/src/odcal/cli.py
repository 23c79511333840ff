"""Command-line interface.

Subcommands: generate (synthetic data), calibrate (full online run),
color (partition an incidence file), observability (distinguishable ODs
versus augmentation degree), metrics (recompute error metrics from
exported CSVs).

Exit codes: 0 success, 2 usage error (argparse), 3 scenario schema error,
4 numerical failure, 5 constraint-solver non-convergence. Environment
overrides: ODCAL_WORKERS (worker pool size), ODCAL_OUTPUT_DIR (default
output directory).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    CalibrationError,
    RunConfig,
    distinguishable_od_count,
    generate_day,
    run_pipeline,
)
from .filter import ConstraintSolveError, InnovationSingularError
from .gradient import load_incidence, multi_start_color, save_coloring
from .scenario_io import SchemaError, load_scenario
from .simulator import Simulator
from .simulator.engine import kernel_name
from .statespace import DegenerateFitError, MeasurementNoiseModel

EXIT_SCHEMA = 3
EXIT_NUMERICAL = 4
EXIT_CONVERGENCE = 5


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("ODCAL_OUTPUT_DIR") or "runs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _workers(args) -> int | None:
    if getattr(args, "workers", None):
        return args.workers
    env = os.environ.get("ODCAL_WORKERS")
    return int(env) if env else None


def _fmt(value) -> str:
    """Full-precision, round-trippable float formatting for CSV cells."""
    return repr(float(value))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_manifest(path: Path, payload: dict):
    payload = dict(payload)
    payload["odcal_version"] = __version__
    payload["kernel"] = kernel_name()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(args) -> int:
    scenario = load_scenario(args.scenario)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else scenario.seeds.get("demand", 0)
    day = generate_day(scenario, seed)
    sim = Simulator(scenario.network, scenario.interval_seconds,
                    scenario.substeps)
    frames = sim.run(day.truth)
    od_ids = scenario.network.od_ids
    sensor_ids = scenario.network.sensor_ids
    _write_csv(out / "demand_true.csv", ["interval", "od_id", "rate_vph"],
               [(h + 1, od_ids[j], _fmt(day.truth.rates[h, j]))
                for h in range(scenario.n_intervals)
                for j in range(len(od_ids))])
    _write_csv(out / "counts.csv",
               ["interval", "sensor_id", "count", "mean_speed_ms"],
               [(f.interval_index, sensor_ids[i], _fmt(f.counts[i]),
                 _fmt(f.mean_speeds[i]))
                for f in frames for i in range(len(sensor_ids))])
    seg_len = {s.sensor_id: scenario.network.segment_by_id(s.segment).length_m
               for s in scenario.network.sensors}
    _write_csv(out / "link_times.csv",
               ["interval", "sensor_id", "travel_time_s"],
               [(f.interval_index, sid,
                 _fmt(seg_len[sid] / f.mean_speeds[i]))
                for f in frames
                for i, sid in enumerate(sensor_ids)])
    _write_manifest(out / "manifest.json", {
        "command": "generate", "scenario": scenario.name, "seed": seed,
        "intervals": scenario.n_intervals,
        "sensors": len(sensor_ids), "ods": len(od_ids)})
    print(f"wrote demand_true.csv, counts.csv, link_times.csv to {out}")
    return 0


def _config_from_args(scenario, args) -> RunConfig:
    defaults = scenario.filter_defaults
    return RunConfig(
        scenario=scenario,
        degree=args.degree or defaults.get("degree", 1),
        gradient_mode=args.gradient or defaults.get("gradient", "fd"),
        constraint_mode=("nonneg" if args.constrained
                         else defaults.get("constraint", "nonneg")),
        prediction_steps=args.steps,
        workers=_workers(args),
        delta_frac=defaults.get("delta_frac", 0.05),
        delta_floor=defaults.get("delta_floor", 1.0),
        gain_regularization=defaults.get("gain_regularization", 1e-8),
        ar_max_order=defaults.get("ar_max_order", 5),
    )


def cmd_calibrate(args) -> int:
    scenario = load_scenario(args.scenario)
    config = _config_from_args(scenario, args)
    out = _out_dir(args)
    started = time.perf_counter()
    prepared, test_day, result = run_pipeline(config)
    elapsed = time.perf_counter() - started
    od_ids = scenario.network.od_ids
    sensor_ids = scenario.network.sensor_ids
    truth = test_day.truth.rates if test_day.truth is not None else None
    _write_csv(out / "estimates.csv",
               ["interval", "od_id", "estimated", "true", "historical"],
               [(h + 1, od_ids[j], _fmt(result.estimates[h, j]),
                 _fmt(truth[h, j]) if truth is not None else "",
                 _fmt(prepared.historical.demand[h, j]))
                for h in range(scenario.n_intervals)
                for j in range(len(od_ids))])
    pred_rows = []
    for step, pred in sorted(result.predicted_counts.items()):
        for h in range(scenario.n_intervals):
            if not np.all(np.isfinite(pred[h])):
                continue
            for i, sid in enumerate(sensor_ids):
                pred_rows.append((step, h + 1, sid, _fmt(pred[h, i]),
                                  _fmt(result.observed_counts[h, i])))
    _write_csv(out / "predictions.csv",
               ["step", "interval", "sensor_id", "predicted", "observed"],
               pred_rows)
    metric_rows = []
    for name, hm in result.metrics.horizons.items():
        metric_rows.append((name, _fmt(hm.rmse), _fmt(hm.wsse),
                            _fmt(hm.rmsn)))
    _write_csv(out / "metrics.csv", ["horizon", "rmse", "wsse", "rmsn"],
               metric_rows)
    _write_csv(out / "diagnostics.csv",
               ["interval", "innovation_norm", "gain_norm",
                "active_constraints", "gradient_intervals",
                "nominal_intervals", "prediction_intervals", "wall_clock_s"],
               [(r.interval, _fmt(r.innovation_norm), _fmt(r.gain_norm),
                 r.active_constraints, r.gradient_intervals,
                 r.nominal_intervals, r.prediction_intervals,
                 _fmt(r.wall_clock)) for r in result.records])
    _write_manifest(out / "manifest.json", {
        "command": "calibrate", "scenario": scenario.name,
        "label": result.label, "degree": config.degree,
        "gradient_mode": config.gradient_mode,
        "constraint_mode": config.constraint_mode,
        "prediction_steps": config.prediction_steps,
        "seeds": scenario.seeds, "splits": scenario.splits,
        "gradient_evaluations": result.gradient_evaluations,
        "num_colors": result.num_colors,
        "ar_order": prepared.transition.order,
        "process_variance": prepared.transition.noise_variance_q,
        "wall_clock_s": elapsed,
        "workers": config.workers,
    })
    est = result.metrics.horizon("estimation")
    print(f"{result.label}: estimation RMSN {est.rmsn * 100:.1f}%, "
          f"{result.gradient_evaluations} gradient evaluations; "
          f"outputs in {out}")
    return 0


def cmd_color(args) -> int:
    incidence = load_incidence(args.incidence)
    coloring = multi_start_color(incidence, args.starts, seed=args.seed)
    out = _out_dir(args)
    save_coloring(out / "coloring.txt", coloring)
    counts = np.bincount(coloring.colors, minlength=coloring.num_colors)
    degree = np.zeros(incidence.n_parameters, dtype=int)
    for row in incidence.entries:
        cols = np.flatnonzero(row)
        for c in cols:
            degree[c] += len(cols) - 1
    report = {
        "parameters": incidence.n_parameters,
        "measurements": incidence.n_measurements,
        "colors": coloring.num_colors,
        "starts": args.starts,
        "seed": args.seed,
        "largest_group": int(counts.max()) if counts.size else 0,
        "max_row_degree": int(degree.max()) if degree.size else 0,
    }
    _write_manifest(out / "coloring_report.json", report)
    print(f"{incidence.n_parameters} parameters -> {coloring.num_colors} "
          f"groups; wrote {out / 'coloring.txt'}")
    return 0


def cmd_observability(args) -> int:
    scenario = load_scenario(args.scenario)
    out = _out_dir(args)
    rows = []
    for degree in range(1, args.max_degree + 1):
        rows.append((degree, distinguishable_od_count(
            scenario.network, degree, scenario.interval_seconds)))
    _write_csv(out / "observability.csv", ["degree", "distinguishable_ods"],
               rows)
    for degree, count in rows:
        print(f"degree {degree}: {count} distinguishable OD pairs")
    return 0


def cmd_metrics(args) -> int:
    from .calibration import compute_metrics

    by_step: dict = {}
    with open(args.predictions, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = int(row["step"])
            by_step.setdefault(key, []).append(
                (float(row["predicted"]), float(row["observed"])))
    if args.r_model:
        r = np.loadtxt(args.r_model, ndmin=1)
        noise = MeasurementNoiseModel(r_diagonal=r, exact=(r == 0))
    else:
        noise = None
    out = _out_dir(args)
    rows = []
    for step in sorted(by_step):
        pairs = np.asarray(by_step[step])
        if noise is None:
            noise_step = MeasurementNoiseModel(
                r_diagonal=np.ones(1), exact=np.zeros(1, dtype=bool))
            report = compute_metrics(pairs[:, 0], pairs[:, 1], noise_step,
                                     horizon=f"step{step}")
        else:
            est = pairs[:, 0].reshape(-1, noise.n_sensors)
            obs = pairs[:, 1].reshape(-1, noise.n_sensors)
            report = compute_metrics(est, obs, noise, horizon=f"step{step}")
        hm = report.horizon(f"step{step}")
        rows.append((f"step{step}", _fmt(hm.rmse), _fmt(hm.wsse),
                     _fmt(hm.rmsn)))
        print(f"step{step}: RMSE {hm.rmse:.3f}  RMSN {hm.rmsn * 100:.2f}%")
    _write_csv(out / "metrics.csv", ["horizon", "rmse", "wsse", "rmsn"], rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odcal",
        description="Online OD-demand calibration against sensor counts")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a synthetic data day")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("calibrate", help="run the online calibration loop")
    p.add_argument("scenario")
    p.add_argument("--degree", type=int, default=None,
                   help="state augmentation degree r")
    p.add_argument("--gradient", choices=("fd", "psp"), default=None)
    p.add_argument("--constrained", action="store_true",
                   help="force the non-negativity constraint")
    p.add_argument("--steps", type=int, default=3,
                   help="prediction horizon in intervals")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("color", help="partition parameters from an incidence file")
    p.add_argument("incidence")
    p.add_argument("--starts", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_color)

    p = sub.add_parser("observability",
                       help="distinguishable OD count per augmentation degree")
    p.add_argument("scenario")
    p.add_argument("--max-degree", type=int, default=6)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_observability)

    p = sub.add_parser("metrics", help="recompute metrics from exported CSVs")
    p.add_argument("predictions", help="predictions.csv from a calibrate run")
    p.add_argument("--r-model", default=None,
                   help="text file of per-sensor variances for WSSE")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ConstraintSolveError as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except CalibrationError as exc:
        cause = exc.__cause__
        if isinstance(cause, ConstraintSolveError):
            print(f"convergence error: {exc}", file=sys.stderr)
            return EXIT_CONVERGENCE
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InnovationSingularError, DegenerateFitError,
            np.linalg.LinAlgError, FileNotFoundError, ValueError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
