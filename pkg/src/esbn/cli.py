"""``esbn`` command-line tool.

Subcommands ``simulate``, ``train``, ``eval``, ``sweep`` and ``localize``
wrap the functions in :mod:`esbn.harness`.  Global flags may appear before
or after the subcommand.  Exit codes: 0 success, 2 configuration error,
3 data error, 4 numeric failure.
"""

import argparse
import dataclasses
import logging
import os
import sys

from . import harness
from .config import TOOL_VERSION, ExperimentConfig, load_config, validate
from .errors import ConfigurationError, DataError, EsbnError, NumericError

log = logging.getLogger("esbn")


def _global_flags(suppress):
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=default, help="JSON experiment config")
    p.add_argument("--seed", type=_u64, default=default, help="global seed, overrides the config")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory, overrides the config")
    p.add_argument("--threads", type=_positive_int, default=default,
                   help="worker threads for frame synthesis (fallback: ESIW_THREADS)")
    p.add_argument("--quiet", action="store_true", default=default, help="only print errors")
    return p


def _u64(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser():
    sub_globals = _global_flags(suppress=True)
    parser = _Parser(prog="esbn", parents=[_global_flags(suppress=False)],
                     description="EEG source imaging benchmark: ESBN versus numerical inverses.")
    parser.add_argument("--version", action="version", version=f"esbn {TOOL_VERSION}")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs.required = True

    subs.add_parser("simulate", parents=[sub_globals], help="generate leadfield and datasets")

    p = subs.add_parser("train", parents=[sub_globals], help="train ESBN (and fine-tune)")
    p.add_argument("--resume", action="store_true", help="continue from model/esbn.esiw")
    p.add_argument("--no-finetune", action="store_true", help="skip the unsupervised stage")

    p = subs.add_parser("eval", parents=[sub_globals], help="per-method LE / SD / AUC table")
    p.add_argument("--checkpoint", metavar="PATH", help="supervised ESBN checkpoint to evaluate")
    p.add_argument("--methods", nargs="+", metavar="NAME", help="subset of methods to run")

    p = subs.add_parser("sweep", parents=[sub_globals], help="depth / SNR / loose sweeps")
    p.add_argument("axis", choices=("depth", "snr", "loose"))
    p.add_argument("--methods", nargs="+", metavar="NAME")

    p = subs.add_parser("localize", parents=[sub_globals], help="apply an inverse to imported frames")
    p.add_argument("--leadfield", required=True, metavar="PATH")
    p.add_argument("--frames", required=True, metavar="PATH")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--method", choices=("MNE", "dSPM", "sLORETA", "eLORETA"))
    which.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--noise", metavar="PATH", help="noise frames for the covariance estimate")
    p.add_argument("--output", default="estimates.esiw", metavar="NAME",
                   help="file name inside <out>/localize")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(output_dir=args.out)
    if getattr(args, "no_finetune", False):
        cfg = cfg.replace(esbn=dataclasses.replace(cfg.esbn, finetune=False))
    return validate(cfg)


def resolve_threads(args, environ=os.environ):
    if args.threads is not None:
        return args.threads
    raw = environ.get("ESIW_THREADS")
    if raw is None or raw == "":
        return 1
    try:
        return _positive_int(raw)
    except argparse.ArgumentTypeError as exc:
        raise ConfigurationError(f"ESIW_THREADS: {exc}") from None


def _summary(command, result):
    if command == "eval":
        return {"csv": result["csv"], "json": result["json"], "methods": result["report"].rows}
    if command == "sweep":
        return {"paths": result["paths"], "bin_sizes": result["bin_sizes"]}
    return result


def run(args):
    cfg = resolve_config(args)
    threads = resolve_threads(args)
    command = args.command
    if command == "simulate":
        result = harness.cmd_simulate(cfg, threads)
    elif command == "train":
        result = harness.cmd_train(cfg, resume=args.resume)
    elif command == "eval":
        result = harness.cmd_eval(cfg, checkpoint=args.checkpoint, methods=args.methods)
    elif command == "sweep":
        result = harness.cmd_sweep(cfg, args.axis, methods=args.methods, threads=threads)
    else:
        result = harness.cmd_localize(cfg, args.leadfield, args.frames, method=args.method,
                                      checkpoint=args.checkpoint, noise_path=args.noise,
                                      out_name=args.output)
    return _summary(command, result)


def exit_code(exc):
    if isinstance(exc, EsbnError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return DataError.exit_code
    if isinstance(exc, (FloatingPointError, ZeroDivisionError)):
        return NumericError.exit_code
    raise exc


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigurationError as exc:
        print(f"esbn: error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        summary = run(args)
    except (EsbnError, OSError, FloatingPointError, ZeroDivisionError) as exc:
        print(f"esbn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    if not args.quiet:
        print(harness.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
