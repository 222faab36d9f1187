"""Command-line interface.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from tabadv import runner
from tabadv.runner import ConfigError, ExperimentConfig, StageError
from tabadv.schema import DataError, SchemaError, load_csv, load_schema

log = logging.getLogger("tabadv")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabadv", description="Constrained tabular adversarial attacks and evaluation.")
    sub = p.add_subparsers(dest="verb", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (YAML or JSON)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--jobs", type=int, help="worker processes for per-sample work")
    common.add_argument("--stage", help=f"stop after this stage ({', '.join(runner.STAGES)})")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("validate", parents=[common], help="check a config and its data files")
    sub.add_parser("run", parents=[common], help="run the full pipeline")
    sub.add_parser("attack", parents=[common], help="run attacks against saved models")
    sub.add_parser("evaluate", parents=[common], help="compute metrics from saved ledgers")
    sub.add_parser("stats", parents=[common], help="recompute statistical tests on a saved report")
    return p


def _config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw = {**cfg.raw, "seed": args.seed}
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg.jobs = args.jobs
    if args.out is not None:
        cfg.output = args.out
    return cfg


def _out(cfg: ExperimentConfig) -> Path:
    if cfg.output is None:
        raise ConfigError("no output directory: pass --out or set 'output' in the config")
    return Path(cfg.output)


def _summary(report) -> str:
    lines = []
    for c in report.cells:
        sr = c["success"]["overall_sr"]
        med = c["l0"]["quartiles"][1] if c["l0"]["quartiles"] else None
        lines.append(f"{c['attack']:>20s} -> {c['target']:<6s} overall_sr={sr:.3f} median_l0={med}")
    return "\n".join(lines)


def _dispatch(args) -> int:
    if args.verb == "stats":
        path = args.out / "report.json" if args.out is not None else None
        if path is None and args.config is not None:
            path = _out(_config(args)) / "report.json"
        if path is None:
            raise ConfigError("stats needs --out (directory holding report.json)")
        if not path.exists():
            raise DataError(f"no report at {path}")
        runner.restat_report(path)
        print(f"stats written to {path}")
        return EXIT_OK

    cfg = _config(args)
    if args.verb == "validate":
        schema = load_schema(cfg.schema_path)
        cfg.validate(schema)
        ds = load_csv(cfg.data_csv, schema)
        print(f"config ok: {len(ds)} rows, {schema.n_features} features, "
              f"{len(cfg.targets)} targets, {len(cfg.attacks)} attacks")
        return EXIT_OK
    if args.verb == "run":
        report = runner.run_experiment(cfg, _out(cfg), until=args.stage, jobs=cfg.jobs)
        if report is not None:
            print(_summary(report))
        print(f"artifacts in {_out(cfg)}")
        return EXIT_OK
    if args.verb == "attack":
        runner.attack_saved(cfg, _out(cfg), cfg.jobs)
        print(f"ledgers written to {_out(cfg) / 'ledgers'}")
        return EXIT_OK
    if args.verb == "evaluate":
        report = runner.evaluate_saved(cfg, _out(cfg))
        print(_summary(report))
        return EXIT_OK
    raise ConfigError(f"unknown verb {args.verb!r}")


def _code(exc) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, (ConfigError, SchemaError)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _code(exc)
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("failure")
        return code


if __name__ == "__main__":
    sys.exit(main())
