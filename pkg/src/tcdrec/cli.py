"""Command-line entry points.

Commands: prepare | train | evaluate | ablate | noise | buckets |
semantic-eval | analyze | export-weights. Each command resolves one config
(file plus --set overrides), is idempotent for an identical resolved config,
and honors --force to rebuild. Exit codes: 0 success, 1 usage error, 2
runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, config_hash, load_config, save_config

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        raise UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", type=Path, help="run config JSON file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config entry, e.g. model.d=64")
    sub.add_argument("--force", action="store_true", help="rebuild existing artifacts")
    sub.add_argument("--seeds", type=str, default="0,1,2",
                     help="comma-separated train seeds for suites")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    try:
        apply_overrides(cfg, args.overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="tcdrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("prepare", "build the dataset bundle (log, splits, negatives, cache, PCA)"),
        ("train", "train the configured variant"),
        ("evaluate", "score the test split with the trained checkpoint"),
        ("ablate", "train and evaluate every ablation variant"),
        ("noise", "retrain under 0/10/20% training noise"),
        ("buckets", "evaluate per interval-variance bucket"),
        ("semantic-eval", "semantic-only variant study"),
        ("analyze", "interval-ratio analytics of the interaction log"),
        ("export-weights", "export fusion-gate vectors for sampled users"),
    ):
        _add_common(sub.add_parser(name, help=text))
    return parser


def _seeds(args) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError as exc:
        raise UsageError(f"bad --seeds value {args.seeds!r}") from exc


def _announce(cfg: RunConfig, command: str) -> None:
    from .pipeline import run_dir, write_run_meta

    out = write_run_meta(cfg, command)
    save_config(cfg, out / "config.json")
    logger.info("%s -> %s (config %s)", command, run_dir(cfg), config_hash(cfg))


def run_command(args) -> int:
    from . import experiments, pipeline, runs

    cfg = _resolve(args)
    command = args.command
    _announce(cfg, command)

    if command == "prepare":
        pipeline.prepare(cfg, force=args.force)
        print(f"dataset ready at {pipeline.dataset_dir(cfg)}")
        return 0
    if command == "train":
        pipeline.prepare(cfg)
        ckpt, result = runs.train_run(cfg, force=args.force)
        if result is None:
            print(f"checkpoint already exists at {ckpt}; skipped (use --force)")
        else:
            print(f"trained {cfg.variant}: best val MRR {result.best_val_mrr:.4f} "
                  f"at epoch {result.best_epoch}; checkpoint {ckpt}")
        return 0
    if command == "evaluate":
        report = runs.evaluate_run(cfg, "test", force=args.force)
        print(report.to_json(), end="")
        return 0
    if command == "ablate":
        rows = experiments.run_ablation(cfg, _seeds(args))
        print(json.dumps(rows, sort_keys=True, indent=2))
        return 0
    if command == "noise":
        rows = experiments.run_noise(cfg, _seeds(args))
        print(json.dumps(rows, sort_keys=True, indent=2))
        return 0
    if command == "buckets":
        report = experiments.run_buckets(cfg)
        print(report.to_json(), end="")
        return 0
    if command == "semantic-eval":
        rows = experiments.run_semantic(cfg, _seeds(args))
        print(json.dumps(rows, sort_keys=True, indent=2))
        return 0
    if command == "analyze":
        table = experiments.run_intervals(cfg)
        print(json.dumps(table, sort_keys=True, indent=2))
        return 0
    if command == "export-weights":
        matrices = experiments.export_fusion_weights(cfg)
        for domain, mat in matrices.items():
            print(f"domain {domain}: gate matrix {mat.shape}")
        return 0
    raise UsageError(f"unknown command {command!r}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return run_command(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
