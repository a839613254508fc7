"""Command-line entry point.

    feddiff run CONFIG [key=value ...] [--out DIR]
    feddiff demo {collapse,inversion-roundtrip,mixture-ddpm,new-client} [...]
    feddiff inspect CHECKPOINT

Exit codes: 0 success / demo PASS, 1 demo FAIL, 2 usage or config error,
3 numeric abort.  FEDDIFF_OUTPUT_ROOT sets the default output root
(default ./runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import checkpoint
from .config import apply_overrides, config_hash, load_config, to_dict
from .demos import DEMOS
from .exceptions import CheckpointError, ConfigError, DataError, NumericError
from .harness import run_federation
from .metrics import MetricsReport


def _out_root() -> Path:
    return Path(os.environ.get("FEDDIFF_OUTPUT_ROOT", "runs"))


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def _write_rows_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt_cell(v) for v in row) + "\n")


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, overrides=args.overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    chash = config_hash(cfg)
    out_dir = Path(args.out) if args.out else \
        _out_root() / f"run-{chash}-s{cfg.federation.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = {
        "config_path": os.path.abspath(args.config),
        "config": to_dict(cfg),
        "config_hash": chash,
        "seed": cfg.federation.seed,
        "out_dir": str(out_dir),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    try:
        result = run_federation(cfg)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except (DataError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    result.report.write_csv(out_dir / "metrics.csv")
    result.report.write_summary(out_dir / "summary.json")
    if result.server is not None and result.server.estimator is not None \
            and cfg.federation.checkpoint_every > 0:
        checkpoint.save_server(out_dir / "server.ckpt", result.server)
    print(f"wrote {out_dir / 'metrics.csv'}")
    print(f"final average accuracy: "
          f"{result.report.summary['final_avg_accuracy']:.4f}")
    return 0


def cmd_demo(args) -> int:
    runner = DEMOS.get(args.name)
    if runner is None:
        print(f"unknown demo {args.name!r}; choose from "
              f"{', '.join(sorted(DEMOS))}", file=sys.stderr)
        return 2
    try:
        result = runner(seed=args.seed)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    out_dir = Path(args.out) if args.out else _out_root() / "demos"
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{result.name}-s{args.seed}.csv"
    _write_rows_csv(csv_path, result.header, result.rows)
    verdict = "PASS" if result.passed else "FAIL"
    print(f"{verdict} {result.name}: {result.headline}")
    print(f"data: {csv_path}")
    return 0 if result.passed else 1


def cmd_inspect(args) -> int:
    try:
        print(checkpoint.describe(args.path))
    except (CheckpointError, OSError) as exc:
        print(f"inspect error: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feddiff",
        description="Federated learning with diffusion-based parameter "
                    "aggregation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to a key-value config file")
    p_run.add_argument("overrides", nargs="*",
                       help="dotted overrides, e.g. partition.s_percent=20")
    p_run.add_argument("--out", help="output directory (default under "
                                     "FEDDIFF_OUTPUT_ROOT)")
    p_run.set_defaults(func=cmd_run)

    p_demo = sub.add_parser("demo", help="run a named desk-scale demo")
    p_demo.add_argument("name", help=f"one of: {', '.join(sorted(DEMOS))}")
    p_demo.add_argument("--seed", type=int, default=0)
    p_demo.add_argument("--out", help="directory for the emitted CSV")
    p_demo.set_defaults(func=cmd_demo)

    p_ins = sub.add_parser("inspect", help="describe a checkpoint container")
    p_ins.add_argument("path")
    p_ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
