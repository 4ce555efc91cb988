"""Dataset preparation and run-directory management.

`prepare` turns a run config into an on-disk dataset bundle: the (possibly
noise-injected) interaction log, user splits, evaluation negatives, the
prompt-embedding cache, and fitted projections. Everything downstream of the
log is deterministic in the config, so the bundle stores only what is
expensive or random: the log, the split, the negatives, the cache, the PCA.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig, canonical_json, config_hash, dataset_hash, derive_seed
from .features import FeaturizerContext, featurize, training_corpus
from .semantic import EmbeddingCache, fit_pca, make_encoder
from .temporal import GapTokenVocab

logger = logging.getLogger(__name__)

VIEWS = ("A", "B", "M")


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "runs" / config_hash(cfg)


def dataset_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "datasets" / dataset_hash(cfg)


@dataclass
class Bundle:
    cfg: RunConfig
    log: D.InteractionLog
    train_users: list[str]
    valid_users: list[str]
    test_users: list[str]
    delta_max: dict[str, int]
    t0: int
    path: Path
    vocab: GapTokenVocab
    encoder: object
    cache: EmbeddingCache

    def context(self, cf_seed: int | None = None) -> FeaturizerContext:
        return FeaturizerContext(
            log=self.log,
            delta_max=self.delta_max,
            t0=self.t0,
            model_cfg=self.cfg.model,
            vocab=self.vocab,
            encoder=self.encoder,
            cache=self.cache,
            cf_seed=derive_seed(self.cfg.split_seed, "counterfactual")
            if cf_seed is None else cf_seed,
        )

    def train_instances(self) -> list[D.Instance]:
        return D.build_instances(
            self.log, self.train_users, self.cfg.model.max_len,
            self.cfg.model.targets_per_user,
        )

    def eval_instances(self, split: str) -> list[D.Instance]:
        users = {"valid": self.valid_users, "test": self.test_users}[split]
        instances = D.build_instances(self.log, users, self.cfg.model.max_len, 1)
        negatives = json.loads((self.path / f"negatives_{split}.json").read_text())
        keyed = {tuple(rec["key"]): rec["negatives"] for rec in negatives}
        for inst in instances:
            inst.negatives = keyed[(inst.user_id, inst.target_domain, inst.target_ts)]
        return instances

    def projection(self, time_mode: str) -> tuple[np.ndarray, np.ndarray]:
        """Load (or lazily fit) the PCA for a prompt time mode."""
        path = self.path / f"projection_{time_mode}.npz"
        if not path.exists():
            fit_projection_for_mode(self, time_mode)
        blob = np.load(path)
        return blob["components"], blob["mean"]


def _delta_max(log: D.InteractionLog, users: list[str], max_len: int) -> dict[str, int]:
    sequences = D.build_user_sequences(log, max_len)
    out = {}
    for view, attr in (("A", "gaps_a"), ("B", "gaps_b"), ("M", "gaps_m")):
        gaps = [
            g
            for u in users
            if u in sequences
            for g in getattr(sequences[u], attr)[1:]
        ]
        out[view] = max(gaps) if gaps else 1
    return out


def prepare(cfg: RunConfig, force: bool = False) -> Bundle:
    """Build (or reload) the dataset bundle for a run config."""
    path = dataset_dir(cfg)
    meta_path = path / "meta.json"
    if meta_path.exists() and not force:
        meta = json.loads(meta_path.read_text())
        if meta["dataset_hash"] == dataset_hash(cfg):
            logger.info("dataset bundle up to date at %s; skipping prepare", path)
            return load_bundle(cfg)
    path.mkdir(parents=True, exist_ok=True)

    if cfg.interactions_path:
        log = D.parse_interactions(cfg.interactions_path)
    elif cfg.synthetic is not None:
        log = D.generate_synthetic(cfg.synthetic)
    else:
        raise ValueError("config needs either interactions_path or synthetic")

    sequences = D.build_user_sequences(log, cfg.model.max_len)
    split = D.SplitSpec(seed=derive_seed(cfg.split_seed, "split"))
    train_users, valid_users, test_users = D.split_dataset(sequences, split)

    if cfg.noise_ratio > 0:
        log = D.inject_noise(log, train_users, cfg.noise_ratio, cfg.split_seed)

    D.write_interactions(log, path / "log.jsonl")

    train_events = [
        ev.timestamp for ev in log.events if ev.user_id in set(train_users)
    ]
    t0 = min(train_events)
    delta_max = _delta_max(log, train_users, cfg.model.max_len)

    meta = {
        "dataset_hash": dataset_hash(cfg),
        "config": json.loads(canonical_json(cfg)),
        "n_items": {"A": log.n_items("A"), "B": log.n_items("B")},
        "t0": t0,
        "delta_max": delta_max,
        "splits": {"train": train_users, "valid": valid_users, "test": test_users},
        "vocab_hash": GapTokenVocab().config_hash(),
    }
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    k = cfg.model.eval_negatives
    for split_name, users in (("valid", valid_users), ("test", test_users)):
        instances = D.build_instances(log, users, cfg.model.max_len, 1)
        D.attach_negatives(instances, log, k, cfg.negatives_seed)
        records = [
            {
                "key": [inst.user_id, inst.target_domain, inst.target_ts],
                "target": inst.target_item,
                "negatives": inst.negatives,
            }
            for inst in instances
        ]
        (path / f"negatives_{split_name}.json").write_text(
            json.dumps(records, sort_keys=True) + "\n"
        )

    bundle = load_bundle(cfg)
    fit_projection_for_mode(bundle, "gap_tokens")
    (path / "PREPARED").write_text("ok\n")
    return bundle


def fit_projection_for_mode(bundle: Bundle, time_mode: str) -> None:
    """Encode the training corpus under a prompt mode and fit its PCA."""
    cfg = bundle.cfg
    ctx = bundle.context()
    instances = bundle.train_instances()
    corpus = training_corpus(instances, ctx, time_mode)
    d_mid = min(cfg.model.d_mid, corpus.shape[1])
    if d_mid < cfg.model.d_mid:
        logger.info(
            "encoder dimension %d below configured d_mid=%d; fitting %d components",
            corpus.shape[1], cfg.model.d_mid, d_mid,
        )
    components, mean = fit_pca(corpus, d_mid)
    np.savez(bundle.path / f"projection_{time_mode}.npz",
             components=components, mean=mean)


def load_bundle(cfg: RunConfig) -> Bundle:
    path = dataset_dir(cfg)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(
            f"no prepared dataset at {path}; run the `prepare` command first"
        )
    meta = json.loads(meta_path.read_text())
    if meta["dataset_hash"] != dataset_hash(cfg):
        raise ValueError(
            f"dataset at {path} was prepared with a different config; "
            "re-run `prepare --force`"
        )
    log = D.parse_interactions(path / "log.jsonl")
    vocab = GapTokenVocab()
    encoder = make_encoder(cfg.encoder_backend, cfg.stub_dim, cfg.stub_seed)
    cache_dir = os.environ.get("TCDREC_CACHE_DIR")
    cache_path = (Path(cache_dir) if cache_dir else path) / "embeddings.cache"
    cache = EmbeddingCache(cache_path, encoder.name, encoder.version,
                           vocab.config_hash())
    return Bundle(
        cfg=cfg,
        log=log,
        train_users=meta["splits"]["train"],
        valid_users=meta["splits"]["valid"],
        test_users=meta["splits"]["test"],
        delta_max={k: int(v) for k, v in meta["delta_max"].items()},
        t0=int(meta["t0"]),
        path=path,
        vocab=vocab,
        encoder=encoder,
        cache=cache,
    )


def featurized_split(bundle: Bundle, split: str, need_semantic: bool,
                     time_mode: str = "gap_tokens", dtype=None):
    import torch

    dtype = dtype or torch.float32
    ctx = bundle.context()
    if split == "train":
        instances = bundle.train_instances()
    else:
        instances = bundle.eval_instances(split)
    return featurize(instances, ctx, need_semantic, time_mode, dtype), instances


def write_run_meta(cfg: RunConfig, name: str) -> Path:
    """Record wall-clock metadata next to (never inside) deterministic reports."""
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"command": name, "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    (out / f"{name}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out
