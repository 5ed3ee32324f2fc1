"""Command-line entry point: ``gradmatch {condense,eval,ablate,xarch,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint import CheckpointError
from .condenser import DivergenceError
from .evaluation import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradmatch", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="override condense.seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--trace", action="store_true", help="write JSON-lines traces")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("condense", parents=[common], help="synthesize condensed sets")
    ev = sub.add_parser("eval", parents=[common], help="train from scratch on a small set")
    src = ev.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", type=Path, nargs="+", help="DCSET1 checkpoint(s)")
    src.add_argument("--coreset", choices=["random", "herding", "herding_embedding", "whole"],
                     help="baseline selection instead of a checkpoint")
    sub.add_parser("ablate", parents=[common], help="sweep one condensation setting")
    sub.add_parser("xarch", parents=[common], help="cross-architecture matrix")
    st = sub.add_parser("selftest", help="run the finite-difference oracle suite")
    st.add_argument("--instances", type=int, default=20)
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "selftest":
        from . import selftest
        return EXIT_OK if selftest.run(args.instances) else 1

    overrides = {}
    if args.seed is not None:
        overrides["condense.seed"] = args.seed
    try:
        cfg = (config_mod.load(args.config, overrides) if args.config
               else config_mod.resolve({"condense": {"seed": args.seed}} if args.seed is not None else {}))
    except config_mod.ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    out = args.out or Path(cfg["output"]["dir"])
    if args.trace:
        cfg["output"]["trace"] = True

    from . import experiments

    try:
        if args.command == "condense":
            metrics = experiments.run_condense(cfg, out, args.jobs)
            print(json.dumps(metrics, indent=2))
        elif args.command == "eval":
            rep = experiments.run_eval(cfg, out, args.checkpoint or (), args.coreset)
            print(f"accuracy {rep.mean:.4f} +- {rep.std:.4f} over {rep.runs} runs")
        elif args.command == "ablate":
            rows = experiments.run_ablate(cfg, out, args.jobs)
            print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
        elif args.command == "xarch":
            matrix = experiments.run_xarch(cfg, out, args.jobs)
            for (src, tgt), rep in matrix.items():
                print(f"{src:>14s} -> {tgt:<14s} {rep.mean:.4f} +- {rep.std:.4f}")
    except config_mod.ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, TrainingError) as exc:
        _record_failure(out, exc)
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, CheckpointError) as exc:
        _record_failure(out, exc)
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        _record_failure(out, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _record_failure(out: Path, exc: Exception) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(
            {"status": "error", "error": type(exc).__name__, "message": str(exc)}, indent=2) + "\n")
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
