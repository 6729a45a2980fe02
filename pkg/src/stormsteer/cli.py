"""Command line entry point: ``stormsteer <stage> --config PATH [--seed S] [--workdir D] [--force]``.

Exit codes: 0 success, 2 configuration error, 3 missing or stale upstream
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

STAGE_CHOICES = ("generate", "train", "catalog", "intervene", "evaluate", "all", "report")


def _limit_blas_threads() -> None:
    # BLAS pools multiply with the worker pool; keep each process at one thread unless told otherwise
    n = os.environ.get("STORMSTEER_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stormsteer", description="Toy extreme-precipitation steering pipeline.")
    p.add_argument("stage", choices=STAGE_CHOICES)
    p.add_argument("--config", help="YAML run configuration (defaults are used if omitted)")
    p.add_argument("--seed", type=int, help="global seed; overrides the config")
    p.add_argument("--workdir", help="output directory; overrides the config and STORMSTEER_WORKDIR")
    p.add_argument("--force", action="store_true", help="accept upstream outputs built from another config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _limit_blas_threads()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    from .config import load_config
    from .errors import StormsteerError
    from .pipeline import run_pipeline

    try:
        cfg = load_config(args.config, {"seed": args.seed, "workdir": args.workdir})
        result = run_pipeline(cfg, args.stage, force=args.force)
    except StormsteerError as exc:
        print(f"stormsteer: error: {exc}", file=sys.stderr)
        return exc.exit_code
    summary = {k: result[k] for k in ("stage", "config_hash", "n_events", "lambdas") if k in result}
    print(json.dumps(summary or {"config_hash": result.get("config_hash")}, ensure_ascii=False))
    return 0


if __name__ == "__main__":
    sys.exit(main())
