"""Single-run orchestration: build, train, evaluate, reproduce.

Seeding policy: torch parameter init and batch order derive from the run's
train seed; dataset randomness (splits, negatives, counterfactual prompts,
noise) derives from the dataset seeds. Two runs with the same resolved
config produce byte-identical reports with the stub encoder.
"""

from __future__ import annotations

import logging
from pathlib import Path

import torch

from .config import RunConfig, config_hash, derive_seed
from .data import bucket_by_interval_variance
from .metrics import MetricReport, evaluate, model_score_fn
from .model import CrossDomainRecommender, build_variant
from .pipeline import Bundle, featurized_split, load_bundle, run_dir
from .trainer import TrainResult, load_checkpoint, save_checkpoint, train_model

logger = logging.getLogger(__name__)


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def checkpoint_path(cfg: RunConfig) -> Path:
    return run_dir(cfg) / "checkpoint.pt"


def build_model(bundle: Bundle, cfg: RunConfig,
                dtype: torch.dtype = torch.float32) -> CrossDomainRecommender:
    variant = build_variant(cfg.variant)
    pca = bundle.projection(variant.time_mode) if variant.semantic else None
    set_determinism(derive_seed(cfg.train_seed, "init"))
    model = CrossDomainRecommender(
        bundle.log.n_items("A"), bundle.log.n_items("B"), cfg.model, variant, pca
    )
    if dtype is not torch.float32:
        model = model.to(dtype)
    return model


def train_run(cfg: RunConfig, force: bool = False) -> tuple[Path, TrainResult | None]:
    """Train the configured variant; skips when the checkpoint already exists."""
    ckpt = checkpoint_path(cfg)
    if ckpt.exists() and not force:
        logger.info("checkpoint exists at %s; skipping train", ckpt)
        return ckpt, None
    bundle = load_bundle(cfg)
    variant = build_variant(cfg.variant)
    model = build_model(bundle, cfg)
    train_data, _ = featurized_split(
        bundle, "train", need_semantic=variant.semantic, time_mode=variant.time_mode
    )
    valid_data, _ = featurized_split(
        bundle, "valid", need_semantic=variant.semantic, time_mode=variant.time_mode
    )
    result = train_model(
        model, train_data, valid_data, cfg.model,
        seed=derive_seed(cfg.train_seed, "loop"),
        history_path=run_dir(cfg) / "history.json",
    )
    extras = {"config_hash": config_hash(cfg), "delta_max": bundle.delta_max,
              "t0": bundle.t0}
    if variant.semantic:
        components, mean = bundle.projection(variant.time_mode)
        extras["pca_components"] = components.tolist()
        extras["pca_mean"] = mean.tolist()
    save_checkpoint(ckpt, model, variant, extras)
    return ckpt, result


def evaluate_run(cfg: RunConfig, split: str = "test",
                 with_buckets: bool = False, force: bool = False) -> MetricReport:
    """Score the held-out split with the trained checkpoint."""
    ckpt = checkpoint_path(cfg)
    if not ckpt.exists():
        raise FileNotFoundError(
            f"no checkpoint at {ckpt}; run the `train` command first"
        )
    report_path = run_dir(cfg) / f"report_{split}.json"
    if report_path.exists() and not force:
        return MetricReport.from_json(report_path.read_text())
    model, variant, _ = load_checkpoint(ckpt)
    bundle = load_bundle(cfg)
    data, instances = featurized_split(
        bundle, split, need_semantic=variant.semantic, time_mode=variant.time_mode
    )
    bucket_of = bucket_by_interval_variance(instances) if with_buckets else None
    report = evaluate(
        model_score_fn(model), data, config_hash(cfg), bucket_of,
        cfg.model.batch_size,
    )
    report_path.write_text(report.to_json())
    return report
