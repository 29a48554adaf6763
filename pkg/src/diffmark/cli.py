"""Command-line entry point.

    diffmark <stage> [--config cfg.json] [--override key.path=value ...] [--force]
    diffmark all ...            run every stage in order
    diffmark ab-injection ...   compare injection-scale policies at inference
    diffmark bench-hamming      time the key-scan backends

Exit codes: 0 success, 2 configuration error, 3 missing stage dependency,
4 numeric/training failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import config_hash, load_config
from .errors import ConfigError, DependencyError, DiffmarkError, NumericError, TrainingError


def build_parser() -> argparse.ArgumentParser:
    from .stages import STAGES

    p = argparse.ArgumentParser(prog="diffmark", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for stage in STAGES + ["all", "ab-injection"]:
        sp = sub.add_parser(stage)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--override", action="append", default=[], metavar="K=V")
        sp.add_argument("--force", action="store_true", help="re-run even if done")
    bh = sub.add_parser("bench-hamming")
    bh.add_argument("--keys", type=int, default=200_000)
    bh.add_argument("--queries", type=int, default=50)
    bh.add_argument("--bits", type=int, default=64)
    return p


def main(argv=None) -> int:
    import torch

    # tiny tensors throughout; thread sync costs more than it buys
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "bench-hamming":
            from .hamming import BACKEND, benchmark

            results = benchmark(args.keys, args.queries, args.bits)
            print(f"active backend: {BACKEND}")
            for name, row in results.items():
                print(f"{name:>8}: {row['seconds']:.3f}s "
                      f"({row['keys_per_second']:.3e} key-comparisons/s)")
            return 0

        cfg = load_config(args.config, args.override)
        if args.command == "all":
            from .stages import run_all

            run_all(cfg, force=args.force)
            print(f"all stages done under {cfg['out_dir']} (config {config_hash(cfg)})")
        elif args.command == "ab-injection":
            from .stages import ab_injection_experiment

            out = Path(cfg["out_dir"]) / "ab_injection.csv"
            rows = ab_injection_experiment(cfg, out)
            for row in rows:
                print(f"{row['policy']:>12}: bit_acc={row['bit_acc']:.4f}")
            print(f"wrote {out}")
        else:
            from .stages import run_stage

            out = run_stage(cfg, args.command, force=args.force)
            print(f"stage {args.command} done: {out}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, TrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except DiffmarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
