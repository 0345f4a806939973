"""Command line entry point: ``dwrflow <command> [--config FILE] [--threads N] [--model PATH] [--out DIR]``."""
import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config

COMMANDS = {
    "solve": "primal Newton solve on the configured mesh",
    "adapt": "goal-oriented adaptation with the exact or surrogate dual",
    "train": "build the training set and fit the surrogate dual model",
    "predict": "primal solve followed by surrogate dual inference",
    "bench": "per-stage wall times and speedup over thread counts",
    "compare": "exact against surrogate adaptation from the same initial mesh",
}


def build_parser():
    p = argparse.ArgumentParser(prog="dwrflow", description="Adjoint-based mesh adaptation for 2D Euler flow.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--config", help="INI file with [flow], [mesh], [adapt], [train], [run] sections")
        s.add_argument("--threads", type=int, help="element-loop threads (overrides [run] threads)")
        s.add_argument("--model", help="surrogate model file (read by adapt/predict/compare, written by train)")
        s.add_argument("--out", help="output directory (overrides [run] out)")
        s.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        if name == "adapt":
            s.add_argument("--dual", choices=("exact", "surrogate"), help="dual solver (overrides [adapt] dual)")
        if name == "bench":
            s.add_argument("--thread-counts", help="comma separated thread counts, e.g. 1,2,4")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.threads is not None:
        overrides["run.threads"] = str(args.threads)
    if args.out is not None:
        overrides["run.out"] = args.out
    if args.model is not None and args.command != "train":
        overrides["adapt.model"] = args.model
    if getattr(args, "dual", None):
        overrides["adapt.dual"] = args.dual
    try:
        rc = load_config(args.config, overrides)
    except (ConfigError, ValueError) as err:
        print(f"dwrflow: configuration error: {err}", file=sys.stderr)
        return 2
    try:
        if args.command == "solve":
            res = pipeline.run_solve(rc)
            print(f"J = {res['J']:.10g} ({res['mesh'].n_active} elements, {res['state'].iteration} Newton steps)")
        elif args.command == "adapt":
            res = pipeline.run_adapt(rc)
            print(f"J = {res['J']:.10g} on {res['mesh'].n_active} elements after {len(res['rows'])} rounds")
        elif args.command == "train":
            res = pipeline.run_train(rc, args.model)
            print(f"model written to {res['path']}")
        elif args.command == "predict":
            res = pipeline.run_predict(rc)
            print(f"predicted z on {res['mesh'].n_active} elements in {res['seconds']:.3f} s")
        elif args.command == "bench":
            counts = [int(v) for v in args.thread_counts.split(",")] if args.thread_counts else None
            rep = pipeline.run_bench(rc, counts)
            for row in rep.rows():
                print("{:<14s} threads={:<3d} {:9.4f} s  speedup {:5.2f}  identical={}".format(*row))
        elif args.command == "compare":
            res = pipeline.run_compare(rc)
            print(f"reference J = {res['J_ref']:.10g}; comparison written to {rc.out}")
    except pipeline.PipelineError as err:
        print(f"dwrflow: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
