"""Command-line entry point: ``python -m sscmr <verb> ...``."""

import argparse
import json
import logging
import os
import sys

from .config import PROFILES, config_from_dict, derive_seed
from .dataset import LABEL_MODES, generate_synthetic, save_dataset
from .errors import ConfigError, SscmrError, StageError
from .experiments import (ABLATIONS, ablate, ablation_table, csv_text, lp_compare,
                          reevaluate, run_pipeline, sweep, write_report)
from .retrieval import format_table

DEFAULT_FRACTIONS = "0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"


def _fractions(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from exc


def _names(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=default, help="master seed")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--profile", choices=sorted(PROFILES), default=default,
                        help="hyperparameter preset")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sscmr",
        description="Semi-supervised cross-modal retrieval experiments.")
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, help="number of classes (label dimension)")
    p.add_argument("--per-class", type=int, help="samples per class")
    p.add_argument("--dx", type=int, help="x-modality feature dimension")
    p.add_argument("--dy", type=int, help="y-modality feature dimension")
    p.add_argument("--noise", type=float, help="Gaussian noise sigma")
    p.add_argument("--label-mode", choices=LABEL_MODES)
    p.add_argument("--extra-tag-prob", type=float,
                   help="multi-label: chance of each additional tag")

    p = sub.add_parser("train", parents=[common], help="train LP and CRL, then evaluate")
    p.add_argument("--mode", choices=("supervised", "semi_paired", "semi_unpaired"))
    p.add_argument("--labeled-fraction", type=float)

    p = sub.add_parser("eval", parents=[common], help="re-evaluate a finished train run")
    p.add_argument("run_dir")

    p = sub.add_parser("sweep", parents=[common], help="MAP vs labeled fraction")
    p.add_argument("--fractions", type=_fractions, default=_fractions(DEFAULT_FRACTIONS))
    p.add_argument("--seeds", type=int, default=1, help="number of runs per point")

    p = sub.add_parser("ablate", parents=[common], help="loss-component ablation table")
    p.add_argument("--toggles", type=_names, default=list(ABLATIONS))
    p.add_argument("--seeds", type=int, default=1)

    p = sub.add_parser("lp-compare", parents=[common], help="LP error under L1, BCE and WBCE")
    p.add_argument("--losses", type=_names, default=["l1", "bce", "wbce"])
    p.add_argument("--fractions", type=_fractions, default=_fractions(DEFAULT_FRACTIONS))
    p.add_argument("--seeds", type=int, default=1)
    return parser


def resolve_config(args, overrides=None):
    """Config file (or profile defaults) with command-line overrides applied."""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            d = json.load(fh)
    else:
        d = {}
    if args.seed is not None:
        d["seed"] = args.seed
    for path, value in (overrides or {}).items():
        if value is None:
            continue
        node = d
        keys = path.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return config_from_dict(d, args.profile)


def run_seeds(args, n):
    """Per-run seeds derived from the master seed and the run index."""
    if n < 1:
        raise ConfigError("--seeds must be at least 1")
    master = args.seed if args.seed is not None else 0
    return [derive_seed(master, "sweep", i) for i in range(n)]


def _need_out(args):
    if not args.out:
        raise ConfigError("--out is required for this command")
    return args.out


def cmd_synth(args):
    overrides = {
        "dataset.synthetic.d_c": args.classes,
        "dataset.synthetic.samples_per_class": args.per_class,
        "dataset.synthetic.d_x": args.dx,
        "dataset.synthetic.d_y": args.dy,
        "dataset.synthetic.noise_sigma": args.noise,
        "dataset.synthetic.label_mode": args.label_mode,
        "dataset.synthetic.multi_label_extra_tag_prob": args.extra_tag_prob,
    }
    if args.profile not in (None, "synthetic") and not args.config:
        raise ConfigError("synth needs the synthetic profile or a config with a synthetic spec")
    config = resolve_config(args, overrides)
    if "synthetic" not in config.dataset:
        raise ConfigError("config has no synthetic dataset spec")
    out = _need_out(args)
    spec = config.synthetic_spec()
    data = generate_synthetic(spec)
    try:
        path = save_dataset(data, out, extra={"synthetic_spec": vars(spec),
                                              "config": config.to_dict()})
    except OSError as exc:
        raise StageError("synth", exc) from exc
    print(f"wrote {data.n_x} samples ({spec.d_c} classes) to {path}")


def cmd_train(args):
    config = resolve_config(args, {"mode": args.mode,
                                   "split.labeled_fraction": args.labeled_fraction})
    out = _need_out(args)
    write_config_echo(out, config)
    result = run_pipeline(config, out_dir=out)
    sys.stdout.write(format_table(result.report, f"Ours ({config.mode})"))


def write_config_echo(out, config):
    try:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
            fh.write(config.dumps() + "\n")
    except OSError as exc:
        raise StageError("setup", exc) from exc


def cmd_eval(args):
    try:
        report, config = reevaluate(args.run_dir)
    except (OSError, KeyError, ValueError) as exc:
        raise StageError("eval", exc) from exc
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_report(args.out, report, config)
    sys.stdout.write(format_table(report, f"Ours ({config.mode})"))


def cmd_sweep(args):
    config = resolve_config(args)
    header, rows = sweep(config, args.fractions, run_seeds(args, args.seeds), args.out)
    sys.stdout.write(csv_text(header, rows))


def cmd_ablate(args):
    config = resolve_config(args)
    for t in args.toggles:
        if t not in ABLATIONS:
            raise ConfigError(f"unknown ablation toggle {t!r}; expected one of {list(ABLATIONS)}")
    _, rows = ablate(config, args.toggles, run_seeds(args, args.seeds), args.out)
    sys.stdout.write(csv_text(["toggle", "map50", "map_all"], ablation_table(rows)))


def cmd_lp_compare(args):
    config = resolve_config(args)
    header, rows = lp_compare(config, args.losses, args.fractions,
                              run_seeds(args, args.seeds), args.out)
    sys.stdout.write(csv_text(header, rows))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "lp-compare": cmd_lp_compare,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except StageError as exc:
        print(f"sscmr {args.command}: {exc}", file=sys.stderr)
        return 2
    except (SscmrError, OSError, json.JSONDecodeError) as exc:
        print(f"sscmr {args.command}: stage 'config' failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
