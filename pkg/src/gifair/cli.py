"""Command line: ``gifair run | validate | report``.

Exit codes: 0 success, 1 invalid config, 2 I/O failure.  Each (sweep point,
seed) pair gets its own directory::

    <out>/<algorithm>-lam<NN>-seed<S>/
        rounds.jsonl    one round record per line
        summary.csv     id,group,p_k,final_loss,final_accuracy
        fairness.csv    lambda,mean,variance,discrepancy,gamma_k
        manifest.json   resolved single-run config, code version, diverged flag

``gifair run --config <dir>/manifest.json`` repeats that run exactly.
Floats are written with ``repr``, the shortest text that parses back to the
same double; non-finite values become ``null`` in JSON.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from gifair import __version__
from gifair.algorithms import train
from gifair.config import MANIFEST_VERSION, ExperimentConfig, config_from_mapping, parse_config
from gifair.core import ConfigError
from gifair.datagen import dump_population, population_federation
from gifair.metrics import fairness_report, gamma_k, gradient_moments
from gifair.objectives import client_losses, client_performance

log = logging.getLogger("gifair")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
SCHEMAS = {"rounds": 1, "summary": 1, "fairness": 1}
SUMMARY_COLUMNS = ["id", "group", "p_k", "final_loss", "final_accuracy"]
FAIRNESS_COLUMNS = ["lambda", "mean", "variance", "discrepancy", "gamma_k"]
REPORT_COLUMNS = ["run", "algorithm", "seed", "lambda_fraction"] + FAIRNESS_COLUMNS + ["diverged"]


def _clean(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), allow_nan=False, separators=(",", ":"))


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def run_dirname(point_index: int, algorithm: str, seed: int) -> str:
    return f"{algorithm}-lam{point_index:02d}-seed{seed}"


def planned_runs(cfg: ExperimentConfig, seeds) -> list[tuple[str, dict, float | None]]:
    """``(directory name, single-run config, lambda fraction)`` for every point and seed."""
    out = []
    per_algorithm: dict[str, int] = {}
    for point in cfg.points:
        index = per_algorithm.get(point.algorithm, 0)
        per_algorithm[point.algorithm] = index + 1
        for seed in seeds:
            out.append((run_dirname(index, point.algorithm, seed), cfg.run_config(point, seed),
                        point.lam_fraction))
    return out


def execute_run(run_cfg: dict, directory, lambda_fraction: float | None = None) -> dict:
    """Run one fully resolved config and write its directory.

    ``lambda_fraction`` only annotates the manifest; the config carries the
    absolute lambda.
    """
    directory = Path(directory)
    cfg = config_from_mapping(run_cfg)
    point, seed = cfg.points[0], cfg.seeds[0]
    objective = cfg.make_objective()
    fed = population_federation(cfg.population, seed)
    result = train(cfg.plan_for(point), fed, objective, seed)
    directory.mkdir(parents=True, exist_ok=True)

    with open(directory / "rounds.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(_dumps(rec.to_dict()) + "\n")

    split = cfg.output.eval_split
    deployed = result.personal if result.personal is not None else result.theta
    losses = client_losses(objective, deployed, fed, split)
    accuracy = (client_performance(objective, deployed, fed, split) if objective.is_classifier
                else np.full(fed.K, math.nan))
    _write_csv(directory / "summary.csv", SUMMARY_COLUMNS, [
        {"id": k, "group": int(fed.group_of[k]), "p_k": float(fed.p[k]),
         "final_loss": float(losses[k]), "final_accuracy": float(accuracy[k])}
        for k in range(fed.K)])

    report = fairness_report(objective, fed, deployed, split)
    gamma = gamma_k(objective, fed, point.lam) if cfg.output.gamma else None
    _write_csv(directory / "fairness.csv", FAIRNESS_COLUMNS, [
        {"lambda": point.lam, "mean": report.mean, "variance": report.variance,
         "discrepancy": report.discrepancy,
         "gamma_k": gamma.gamma_k if gamma is not None else None}])

    G, sigma2 = gradient_moments(objective, fed, result.theta, cfg.plan.batch, seed=seed)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "code_version": __version__,
        "schemas": SCHEMAS,
        "config": run_cfg,
        "resolved": {"algorithm": point.algorithm, "lambda": point.lam,
                     "lambda_fraction": lambda_fraction, "lambda_max": cfg.lam_max,
                     "seed": seed, "measure": report.measure, "eval_split": split},
        "diverged": result.diverged,
        "rounds_completed": len(result.records) - int(result.diverged),
        "diagnostics": {"gradient_bound_G": G, "gradient_variance": sigma2,
                        "gamma_max": gamma.gamma_max if gamma is not None else None},
    }
    (directory / "manifest.json").write_text(json.dumps(_clean(manifest), indent=2, allow_nan=False) + "\n",
                                             encoding="utf-8")
    if cfg.output.dump_data:
        dump_population(directory / "data", fed.clients)
    return {"dir": str(directory), "diverged": result.diverged}


def _execute(job):
    return execute_run(*job)


def run_experiment(cfg: ExperimentConfig, out=None, seeds=None, jobs: int = 1) -> list[dict]:
    """Every (sweep point, seed) run of ``cfg``, up to ``jobs`` at a time.

    Diverged runs are reported in their manifest and do not stop the sweep.
    """
    seeds = list(cfg.seeds) if seeds is None else list(seeds)
    out = Path(cfg.output.dir if out is None else out)
    work = [(run_cfg, out / name, frac) for name, run_cfg, frac in planned_runs(cfg, seeds)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_execute, work))
    return [_execute(job) for job in work]


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    results = run_experiment(cfg, args.out, None if args.seed is None else [args.seed], args.jobs)
    for res in results:
        print(f"{res['dir']}{'  (diverged)' if res['diverged'] else ''}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    runs = len(cfg.points) * len(cfg.seeds)
    print(f"ok: {runs} run(s), lambda_max={cfg.lam_max!r}")
    return EXIT_OK


def collect_report(out: Path) -> list[dict]:
    rows = []
    for path in sorted(out.glob("*/fairness.csv")):
        manifest = json.loads((path.parent / "manifest.json").read_text(encoding="utf-8"))
        resolved = manifest["resolved"]
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rows.append({"run": path.parent.name, "algorithm": resolved["algorithm"],
                             "seed": resolved["seed"], "lambda_fraction": resolved["lambda_fraction"],
                             **row, "diverged": manifest["diverged"]})
    return rows


def cmd_report(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise FileNotFoundError(f"no such run directory: {out}")
    rows = collect_report(out)
    if not rows:
        raise FileNotFoundError(f"no fairness.csv files under {out}")
    _write_csv(out / "report.csv", REPORT_COLUMNS, rows)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in REPORT_COLUMNS])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gifair", description="Fairness-regularized federated learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--version", action="version", version=f"gifair {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every sweep point and seed of a config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int, help="run only this seed")
    run.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    run.add_argument("--jobs", type=int, default=1, help="concurrent runs (default 1)")
    run.set_defaults(func=cmd_run)

    validate = sub.add_parser("validate", help="check a config without running it")
    validate.add_argument("--config", required=True, type=Path)
    validate.set_defaults(func=cmd_validate)

    report = sub.add_parser("report", help="merge fairness.csv files under a run directory")
    report.add_argument("--out", required=True, type=Path)
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
