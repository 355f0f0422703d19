"""``dgh`` command line.

    dgh <command> [--config FILE] [--seed N] [--out DIR] [--deterministic]

Each command writes ``<out>/<command>.csv`` (plus a ``.meta.json`` sidecar).
``DGH_THREADS`` caps both BLAS threads and the number of seeds run in parallel.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

COMMAND_NAMES = ("train", "generate", "quantize", "evaluate", "sweep", "ablate", "hist", "augmse", "embed", "e2e")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dgh", description="Batch-norm statistics image synthesis and PTQ experiments.")
    ap.add_argument("command", choices=COMMAND_NAMES)
    ap.add_argument("--config", help="experiment config (JSON)")
    ap.add_argument("--seed", type=int, action="append", help="run only this seed (repeatable)")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--deterministic", action="store_true",
                    help="single-threaded BLAS and serial seeds, so reports are bit-reproducible")
    ap.add_argument("--source", help="calibration source for quantize/evaluate: a method name or image-set dir")
    ap.add_argument("--params", help="quantization parameters JSON for evaluate")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _threads(deterministic: bool) -> int:
    n = 1 if deterministic else max(1, int(os.environ.get("DGH_THREADS", "1")))
    for var in _THREAD_VARS:
        if deterministic or "DGH_THREADS" in os.environ:
            os.environ[var] = str(n)
    return n


def _run_seed(payload):
    command, cfg_dict, seed = payload
    from .harness import commands
    from .harness.config import ExperimentConfig
    from .harness.workspace import Workspace

    cfg = ExperimentConfig.from_dict(cfg_dict)
    if command == "train":
        return commands.cmd_train(cfg, seed)
    return commands.COMMANDS[command](cfg, Workspace(cfg), seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # thread caps must be in the environment before numpy loads BLAS
    workers = _threads(args.deterministic)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from pathlib import Path

    from .harness import commands
    from .harness.config import ExperimentConfig
    from .harness.report import Report

    try:
        d = {}
        if args.config:
            import json
            d = json.loads(Path(args.config).read_text())
        for key in ("out", "source", "params"):
            val = getattr(args, key)
            if val is not None:
                d["output" if key == "out" else key] = val
        if args.seed:
            d["seeds"] = args.seed
        cfg = ExperimentConfig.from_dict(d)
    except (OSError, ValueError, TypeError) as exc:
        print(f"dgh: invalid configuration: {exc}", file=sys.stderr)
        return 2

    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    commands.dump_config(cfg)
    report_path = out / f"{args.command}.csv"
    report = Report(cfg.hash)

    if args.command == "e2e":
        try:
            for seed in cfg.seeds:
                report.extend(commands.cmd_e2e(cfg, seed, report_path=out / f"e2e_seed{seed}.csv"))
                report.write(report_path)
        except commands.StageError as exc:
            report.extend(exc.report)
            report.write(report_path)
            print(f"dgh e2e: {exc}", file=sys.stderr)
            return 1
        return 0

    payloads = [(args.command, cfg.to_dict(), s) for s in cfg.seeds]
    try:
        if workers > 1 and len(payloads) > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=min(workers, len(payloads))) as pool:
                results = list(pool.map(_run_seed, payloads))  # map keeps seed order
        else:
            results = [_run_seed(p) for p in payloads]
    except Exception as exc:
        logging.getLogger("dgh").debug("failure", exc_info=True)
        print(f"dgh {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for r in results:
        report.extend(r)
    report.write(report_path)
    print(report_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
