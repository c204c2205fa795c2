"""Command-line entry point: ``ramanshape <command> [flags]``.

Commands run one stage of the experiment each (see :mod:`ramanshape.experiment`).
On failure a single JSON line ``{"error": ..., "message": ...}`` goes to
stderr and the exit code is nonzero.
"""

import argparse
import json
import logging
import sys

from . import experiment
from .errors import RamanShapeError

COMMANDS = ("gen-dataset", "train", "evaluate", "finetune", "report", "default-config")


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="YAML experiment config")
    p.add_argument("--seed", type=_u64, metavar="U64", default=d, help="master seed")
    p.add_argument("--scale", choices=sorted(experiment.SCALES), default=d,
                   help="dataset size preset (default desk)")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory")
    p.add_argument("--noiseless", action="store_true", default=d, help="switch measurement noise off")
    p.add_argument("--workers", type=int, metavar="N", default=d, help="worker threads")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser():
    parser = argparse.ArgumentParser(prog="ramanshape", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _global_flags(p, suppress=True)
        if name == "train":
            p.add_argument("--train-size", type=int, nargs="+", metavar="N",
                           help="sweep: train one model per size")
        if name == "finetune":
            p.add_argument("--limit", type=int, metavar="K", help="only the first K hard cases")
    return parser


def resolve_config(args):
    scale = args.scale or "desk"
    cfg = experiment.ExperimentConfig.default(scale)
    if args.config:
        cfg = experiment.load_config(args.config, base=cfg)
        if args.scale:
            cfg = experiment.ExperimentConfig.from_dict({**cfg.to_dict(), "scale": scale,
                                                         **experiment.SCALES[scale]})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    d = cfg.to_dict()
    if args.out:
        d["out_dir"] = args.out
    if args.noiseless:
        d["noiseless"] = True
    if args.workers:
        d["workers"] = args.workers
    return experiment.ExperimentConfig.from_dict(d)


def run(args):
    cfg = resolve_config(args)
    if args.command == "default-config":
        sys.stdout.write(cfg.to_yaml())
        return None
    if args.command == "gen-dataset":
        return {"dataset": experiment.cmd_gen_dataset(cfg)}
    if args.command == "train":
        return {"checkpoint": experiment.cmd_train(cfg, args.train_size)}
    if args.command == "evaluate":
        rep, hard = experiment.cmd_evaluate(cfg)
        return {"mu_db": rep.mu, "sigma_db": rep.sigma, "r2": [float(v) for v in rep.r2],
                "n_hard": int(len(hard))}
    if args.command == "finetune":
        return {"hard_cases": len(experiment.cmd_finetune(cfg, args.limit))}
    return {"report": experiment.cmd_report(cfg)}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(message)s")
    try:
        result = run(args)
    except (RamanShapeError, OSError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 1
    if result is not None:
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
