"""advcap command line: toy-data, train, attack-build, eval, experiment, table, gallery."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (TABLE_FORMATS, Experiment, ExperimentConfig, ExperimentReport, MetricsLog,
                         evaluate_checkpoint, render_table)
from .data import make_toy_corpus
from .training import PHASES

log = logging.getLogger("advcap")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", type=Path, default=default(None), help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=default(None), help="override the global seed")
    parser.add_argument("--out", type=Path, default=default(Path("runs/default")), help="output root")
    parser.add_argument("--force", action="store_true", default=default(False), help="redo completed work")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advcap", description=__doc__)
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-data", parents=[common], help="render the synthetic shapes corpus")
    p.add_argument("--num-images", type=int, default=64)
    p.add_argument("--image-size", type=int, default=32)

    p = sub.add_parser("train", parents=[common], help="run one phase (and anything it depends on)")
    p.add_argument("--phase", choices=PHASES, default="baseline")

    p = sub.add_parser("attack-build", parents=[common], help="FGSM the train/test splits against the baseline")
    p.add_argument("--epsilon", type=float, default=None)

    p = sub.add_parser("eval", parents=[common], help="BLEU of a checkpoint on one split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--condition", choices=("clean", "adversarial"), default="clean")

    sub.add_parser("experiment", parents=[common], help="run all five phases and write the report")

    p = sub.add_parser("table", parents=[common], help="render the results table from report.json")
    p.add_argument("--format", choices=TABLE_FORMATS, default="plain")

    p = sub.add_parser("gallery", parents=[common], help="original | perturbed | difference panels")
    p.add_argument("--n-samples", type=int, default=3)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--checkpoint", type=Path, default=None)
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command == "toy-data":
        train, test = make_toy_corpus(args.seed or 0, args.num_images, args.image_size, args.out)
        print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")
        return 0

    if args.command == "table":
        report = ExperimentReport.load(args.out / "report.json")
        sys.stdout.write(render_table(report, args.format))
        return 0

    cfg = load_config(args)
    exp = Experiment(cfg, args.out, force=args.force)

    if args.command == "experiment":
        report = exp.run()
        sys.stdout.write(render_table(report, "plain"))
        return 0 if report.complete else 1

    if args.command == "train":
        if args.phase != "baseline":
            exp.baseline_model()
        row = exp.run_phase(args.phase)
        print(json.dumps(row.to_dict(), indent=1))
        return 0

    if args.command == "attack-build":
        attack = cfg.attack if args.epsilon is None else type(cfg.attack)(args.epsilon, cfg.attack.clamp_min,
                                                                          cfg.attack.clamp_max)
        adv = exp.adversarial_splits(attack)
        print(json.dumps({s: len(d) for s, d in adv.items()}))
        return 0

    if args.command == "eval":
        exp.prepare_data()
        data = exp.splits[args.split] if args.condition == "clean" else exp.adversarial_splits()[args.split]
        entry = evaluate_checkpoint(args.checkpoint, data, exp.vocab, args.condition, args.split,
                                    config_hash=exp.config_hash)
        MetricsLog(args.out / "metrics.jsonl").append(entry)
        print(json.dumps(entry.to_dict(), indent=1))
        return 0

    if args.command == "gallery":
        for path in exp.gallery(args.n_samples, args.split, args.checkpoint):
            print(path)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
