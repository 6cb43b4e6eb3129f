"""``darcyinv`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, DimensionMismatch, FormatError, NumericalError
from .training import MODEL_KINDS

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("darcyinv")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON overrides on top of the preset")
    common.add_argument("--preset", choices=("desk", "paper"), default="desk")
    common.add_argument("--out", metavar="DIR", help="output directory (default: config out_dir)")
    common.add_argument("--threads", type=int, default=1, metavar="N")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="darcyinv", description="Permeability inversion experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("basis", parents=[common], help="build and store the KL basis")
    p.add_argument("--corr-length", type=float)

    p = sub.add_parser("gen", parents=[common], help="generate a dataset")
    p.add_argument("--role", choices=("train", "validation", "test"), default="train")
    p.add_argument("-n", type=int, help="number of samples (default from config sizes)")

    p = sub.add_parser("train", parents=[common], help="train one network")
    p.add_argument("--kind", choices=MODEL_KINDS, required=True)
    p.add_argument("--resume", action="store_true", help="continue from this kind's checkpoint")
    p.add_argument("--init", metavar="CKPT", help="start from another checkpoint's weights")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("eval", parents=[common], help="compare DD and PI checkpoints on the test set")
    p.add_argument("--dd", metavar="CKPT")
    p.add_argument("--pi", metavar="CKPT")
    p.add_argument("--test", metavar="DSET")

    p = sub.add_parser("scenarios", parents=[common], help="run the eight-scenario grid")
    p.add_argument("--only", nargs="+", metavar="NAME")

    sub.add_parser("rare", parents=[common], help="tail sampling and the four rare-event cases")

    p = sub.add_parser("report", parents=[common], help="summarize report CSVs in an output directory")
    p.add_argument("dir", nargs="?")
    return ap


def _dispatch(args) -> None:
    from . import pipeline

    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    if args.command == "report":
        target = args.dir or args.out or load_config(args.config, args.preset).out_dir
        print(pipeline.cmd_report(target))
        return
    cfg = load_config(args.config, args.preset)
    out, th = args.out, args.threads
    if args.command == "basis":
        print(pipeline.cmd_basis(cfg, out, args.corr_length))
    elif args.command == "gen":
        print(pipeline.cmd_gen(cfg, args.role, args.n, out, th))
    elif args.command == "train":
        def progress(it, hist):
            if args.verbose and (it % 10 == 0):
                log.info("iter %d  J=%.6g", it, hist.train_loss[-1])
        if args.iterations is not None and args.iterations < 1:
            raise ConfigError("--iterations must be positive")
        ckpt, hist = pipeline.cmd_train(cfg, args.kind, out, args.resume, args.init, args.iterations, th, progress)
        print(ckpt)
        print(hist)
    elif args.command == "eval":
        paths = pipeline.cmd_eval(cfg, out, args.dd, args.pi, args.test, th)
        print(paths["summary"])
    elif args.command == "scenarios":
        paths = pipeline.cmd_scenarios(cfg, out, args.only, th, lambda n: log.info("scenario %s done", n))
        print(paths["summary"])
    elif args.command == "rare":
        res, paths, info = pipeline.cmd_rare(cfg, out, th)
        log.info("threshold %.4f MPa, acceptance %.3f", info["threshold"], info["acceptance"])
        print(paths["summary"])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (ConfigError, DimensionMismatch) as exc:
        print(f"darcyinv: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"darcyinv: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"darcyinv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
