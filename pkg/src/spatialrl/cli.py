"""Command line entry point: ``spatialrl <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import InvalidInputError, pipeline
from .featsel import PruningError
from .lqrctl import EnvironmentFailure


def build_config(args) -> pipeline.ExperimentConfig:
    path = Path(args.config) if args.config else pipeline.default_config_path()
    cfg = pipeline.load_config(path)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.no_smooth:
        cfg = cfg.replace(autoencoder={"slowness_weight": 0.0})
    if args.no_prune:
        cfg = cfg.replace(features={"prune": False})
    if args.baseline_ae:
        cfg = cfg.replace(autoencoder={"conv_pool": True})
    return cfg


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON experiment config (default: shipped pushing config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="runs/push", help="output directory (default: %(default)s)")
    p.add_argument("--input", help="directory holding earlier stage outputs when they are not under --out")
    p.add_argument("--no-smooth", action="store_true", help="train the autoencoder without the slowness term")
    p.add_argument("--no-prune", action="store_true", help="keep every feature point")
    p.add_argument("--baseline-ae", action="store_true", help="conv+pool bottleneck instead of spatial softmax")
    p.add_argument("-v", "--verbose", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "collect": "train the blind controller and record the image dataset",
        "train-ae": "train the spatial autoencoder on the dataset",
        "prune": "prune features on goal images and fit the Kalman filters",
        "train-ctrl": "train the vision-based controller",
        "eval": "evaluate blind and vision controllers",
        "rank-features": "rank features by predictiveness",
        "plot": "plot learning curves and feature trajectories",
        "run": "run every stage in order",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "run":
            p.add_argument("--stage", choices=pipeline.STAGES, default="collect", help="first stage to run")
        if name == "rank-features":
            p.add_argument("--all", action="store_true", help="rank every feature, not only the kept ones")
    _common(sub.add_parser("show-config", help="print the resolved config as YAML"))
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        out = Path(args.out)
        inputs = Path(args.input) if args.input else None
        cmd = args.command
        if cmd == "show-config":
            import yaml
            print(yaml.safe_dump(cfg.to_dict(), sort_keys=False), end="")
        elif cmd == "collect":
            res = pipeline.collect(cfg, out)
            print(f"blind controller final mean cost {res.curve[-1].mean_cost:.3f}; "
                  f"{sum(len(b.X) for b in res.batches)} episodes written to {out / 'dataset'}")
        elif cmd == "train-ae":
            res = pipeline.train_autoencoder(cfg, out, inputs)
            last = res.history[-1]
            print(f"autoencoder trained: final training loss {last['loss']:.5f}, alpha {last['temperature']:.4f}")
        elif cmd == "prune":
            sel, _ = pipeline.prune(cfg, out, inputs)
            print(f"kept features: {sel.kept_indices}")
        elif cmd == "train-ctrl":
            res = pipeline.train_controller(cfg, out, inputs)
            print(f"vision controller final mean cost {res.curve[-1].mean_cost:.3f}")
        elif cmd == "eval":
            reports = pipeline.run_evaluation(cfg, out, inputs)
            print(pipeline.format_table(list(reports.values())), end="")
        elif cmd == "rank-features":
            print("ranking (best first):", pipeline.rank_features(cfg, out, inputs, all_features=args.all))
        elif cmd == "plot":
            for path in pipeline.plot_results(out, inputs):
                print(path)
        elif cmd == "run":
            reports = pipeline.run_all(cfg, out, inputs, start=args.stage)
            pipeline.plot_results(out, inputs)
            if reports:
                print(pipeline.format_table(list(reports.values())), end="")
    except (InvalidInputError, FileNotFoundError, PruningError, EnvironmentFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
