"""Experiment suites: ablations, interval-variance buckets, noise robustness,
semantic-only variants, interval analytics, and fusion-weight export.

Every suite writes a JSON table plus a static plot under the run's suite
directory, preserving partial rows if a sub-run fails. The semantic-only
study trains just the projection adapter and a domain head on the mixed-view
prompt vectors, isolating the text-derived signal from all behavioral
components.
"""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from torch import nn

from .config import RunConfig, config_hash, derive_seed
from .data import analyze_intervals, bucket_by_interval_variance
from .features import FeaturizedData
from .metrics import MetricReport, evaluate
from .model import build_variant
from .pipeline import Bundle, featurized_split, load_bundle, prepare
from .runs import evaluate_run, load_checkpoint, set_determinism, train_run
from .semantic import SemanticAdapter, counterfactual_loss
from .trainer import quick_mrr

logger = logging.getLogger(__name__)

SUITES = ("ablation", "buckets", "noise", "semantic", "intervals")
ABLATION_VARIANTS = ("V1", "V2", "V3", "V4", "V5", "full")
NOISE_RATIOS = (0.0, 0.1, 0.2)
SEMANTIC_VARIANTS = ("title_only", "title_time", "cf_enhance")


def suite_dir(cfg: RunConfig, name: str) -> Path:
    path = Path(cfg.output_dir) / "suites" / name / config_hash(cfg)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_table(path: Path, rows: list[dict]) -> None:
    path.write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")


def _bar_plot(path: Path, labels: list[str], series: dict[str, list[float]],
              title: str, ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(labels))
    width = 0.8 / max(len(series), 1)
    for i, (name, values) in enumerate(series.items()):
        ax.bar(x + i * width, values, width, label=name)
    ax.set_xticks(x + width * (len(series) - 1) / 2)
    ax.set_xticklabels(labels, rotation=20)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _per_run_cfg(base: RunConfig, **changes) -> RunConfig:
    cfg = copy.deepcopy(base)
    for key, value in changes.items():
        setattr(cfg, key, value)
    return cfg


def _train_and_test(cfg: RunConfig) -> MetricReport:
    prepare(cfg)
    train_run(cfg)
    return evaluate_run(cfg, "test")


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def run_ablation(base: RunConfig, seeds=(0, 1, 2),
                 variants=ABLATION_VARIANTS) -> list[dict]:
    out = suite_dir(base, "ablation")
    rows = []
    table_path = out / "table.json"
    try:
        for variant in variants:
            for seed in seeds:
                cfg = _per_run_cfg(base, variant=variant, train_seed=seed)
                report = _train_and_test(cfg)
                rows.append({"variant": variant, "seed": seed,
                             "domains": report.domains})
                _write_table(table_path, rows)
    except Exception:
        _write_table(table_path, rows)
        raise
    labels = list(variants)
    series = {}
    for domain in ("A", "B"):
        series[f"{domain} MRR"] = [
            float(np.mean([r["domains"][domain]["mrr"] for r in rows
                           if r["variant"] == v]))
            for v in labels
        ]
    _bar_plot(out / "ablation.png", labels, series,
              "Component ablation (seed-mean)", "MRR")
    return rows


def run_noise(base: RunConfig, seeds=(0, 1, 2), ratios=NOISE_RATIOS) -> list[dict]:
    out = suite_dir(base, "noise")
    rows = []
    table_path = out / "table.json"
    try:
        for ratio in ratios:
            for seed in seeds:
                cfg = _per_run_cfg(base, noise_ratio=ratio, train_seed=seed)
                report = _train_and_test(cfg)
                rows.append({"noise_ratio": ratio, "seed": seed,
                             "domains": report.domains})
                _write_table(table_path, rows)
    except Exception:
        _write_table(table_path, rows)
        raise
    labels = [f"{int(r * 100)}%" for r in ratios]
    series = {}
    for domain in ("A", "B"):
        series[f"{domain} MRR"] = [
            float(np.mean([r["domains"][domain]["mrr"] for r in rows
                           if r["noise_ratio"] == ratio]))
            for ratio in ratios
        ]
    _bar_plot(out / "noise.png", labels, series,
              "Training-noise robustness (seed-mean)", "MRR")
    return rows


def run_buckets(base: RunConfig) -> MetricReport:
    out = suite_dir(base, "buckets")
    prepare(base)
    train_run(base)
    report = evaluate_run(base, "test", with_buckets=True, force=True)
    (out / "report.json").write_text(report.to_json())
    labels = sorted(
        {b for domain in report.buckets.values() for b in domain}
    )
    series = {
        f"{domain} MRR": [
            report.buckets[domain].get(b, {}).get("mrr", 0.0) for b in labels
        ]
        for domain in report.buckets
    }
    _bar_plot(out / "buckets.png", [f"bucket {b}" for b in labels], series,
              "Metrics by interval-variance bucket", "MRR")
    return report


def run_intervals(base: RunConfig) -> dict:
    out = suite_dir(base, "intervals")
    bundle = prepare(base)
    table = analyze_intervals(bundle.log)
    (out / "intervals.json").write_text(json.dumps(table, sort_keys=True, indent=2) + "\n")
    labels = ["<=1d", "1d-1w", ">1w"]
    series = {d: [table[d][b] for b in labels] for d in table}
    _bar_plot(out / "intervals.png", labels, series,
              "Adjacent same-domain interval ratios", "proportion")
    return table


# ---------------------------------------------------------------------------
# semantic-only study
# ---------------------------------------------------------------------------

class SemanticOnlyModel(nn.Module):
    """Adapter + domain heads over the mixed-view prompt vector; no behavior."""

    def __init__(self, pca, d: int, n_items_a: int, n_items_b: int, hidden: int = 0):
        super().__init__()
        components, mean = pca
        self.adapter = SemanticAdapter(components, mean, d, hidden)
        self.head = nn.ModuleDict({
            "A": nn.Linear(d, n_items_a + 1, bias=False),
            "B": nn.Linear(d, n_items_b + 1, bias=False),
        })

    def logits(self, batch: FeaturizedData) -> dict[str, torch.Tensor]:
        z = self.adapter(batch.views["M"].sem)
        out = {}
        for domain in ("A", "B"):
            scores = self.head[domain](z)
            pad_col = torch.zeros(scores.shape[1], dtype=torch.bool)
            pad_col[0] = True
            out[domain] = scores.masked_fill(pad_col, float("-inf"))
        return out

    def forward(self, batch: FeaturizedData):
        logits = self.logits(batch)
        return logits["A"], logits["B"], {}


SEMANTIC_TIME_MODE = {
    "title_only": "none",
    "title_time": "gap_tokens",
    "cf_enhance": "gap_tokens",
}


def train_semantic_only(bundle: Bundle, variant: str, seed: int,
                        cf_weight: float = 0.1):
    """Train the semantic branch alone under one prompt/loss regime."""
    if variant not in SEMANTIC_TIME_MODE:
        raise ValueError(
            f"unknown semantic variant {variant!r}; valid: {sorted(SEMANTIC_TIME_MODE)}"
        )
    cfg = bundle.cfg
    time_mode = SEMANTIC_TIME_MODE[variant]
    use_cf = variant == "cf_enhance"
    train_data, _ = featurized_split(bundle, "train", True, time_mode)
    valid_data, _ = featurized_split(bundle, "valid", True, time_mode)
    set_determinism(derive_seed(seed, "semantic-only", variant))
    model = SemanticOnlyModel(
        bundle.projection(time_mode), cfg.model.d,
        bundle.log.n_items("A"), bundle.log.n_items("B"), cfg.model.adapter_hidden,
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.model.learning_rate)
    best_state = copy.deepcopy(model.state_dict())
    best_mrr = -1.0
    bad = 0
    n = len(train_data)
    for epoch in range(cfg.model.epochs):
        order = np.random.default_rng(
            derive_seed(seed, "semantic-order", variant, epoch)
        ).permutation(n)
        for start in range(0, n, cfg.model.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.model.batch_size].copy())
            batch = train_data.batch(idx)
            logits = model.logits(batch)
            loss = torch.zeros(())
            for code, domain in ((0, "A"), (1, "B")):
                rows = batch.row_domain == code
                if rows.any():
                    loss = loss + nn.functional.cross_entropy(
                        logits[domain][rows], batch.targets[rows]
                    )
            if use_cf:
                vt = batch.views["M"]
                valid_rows = vt.lengths >= 2
                loss = loss + cf_weight * counterfactual_loss(
                    model.adapter(vt.sem), model.adapter(vt.sem_small),
                    model.adapter(vt.sem_big), cfg.model.tau_cf,
                    cfg.model.cf_top_k, valid=valid_rows,
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
        val_mrr = quick_mrr(model, valid_data, cfg.model.batch_size)
        if val_mrr > best_mrr:
            best_mrr, bad = val_mrr, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad >= cfg.model.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model


def semantic_only_evaluate(bundle: Bundle, variant: str, seed: int = 0,
                           cf_weight: float = 0.1) -> MetricReport:
    model = train_semantic_only(bundle, variant, seed, cf_weight)
    time_mode = SEMANTIC_TIME_MODE[variant]
    test_data, _ = featurized_split(bundle, "test", True, time_mode)

    def score(sub):
        with torch.no_grad():
            return model.logits(sub)

    return evaluate(score, test_data, config_hash(bundle.cfg),
                    batch_size=bundle.cfg.model.batch_size)


def run_semantic(base: RunConfig, seeds=(0, 1, 2),
                 variants=SEMANTIC_VARIANTS) -> list[dict]:
    out = suite_dir(base, "semantic")
    bundle = prepare(base)
    rows = []
    table_path = out / "table.json"
    try:
        for variant in variants:
            for seed in seeds:
                report = semantic_only_evaluate(bundle, variant, seed)
                rows.append({"variant": variant, "seed": seed,
                             "domains": report.domains})
                _write_table(table_path, rows)
    except Exception:
        _write_table(table_path, rows)
        raise
    labels = list(variants)
    series = {}
    for domain in ("A", "B"):
        series[f"{domain} MRR"] = [
            float(np.mean([r["domains"][domain]["mrr"] for r in rows
                           if r["variant"] == v]))
            for v in labels
        ]
    _bar_plot(out / "semantic.png", labels, series,
              "Semantic-only variants (seed-mean)", "MRR")
    return rows


# ---------------------------------------------------------------------------
# fusion-weight export
# ---------------------------------------------------------------------------

def export_fusion_weights(cfg: RunConfig, sample_size: int = 16) -> dict[str, np.ndarray]:
    """Gate vectors at the final real step per sampled user, per domain view."""
    from .runs import checkpoint_path

    model, variant, _ = load_checkpoint(checkpoint_path(cfg))
    bundle = load_bundle(cfg)
    data, instances = featurized_split(
        bundle, "test", need_semantic=variant.semantic, time_mode=variant.time_mode
    )
    out = suite_dir(cfg, "fusion_weights")
    matrices = {}
    for code, domain in ((0, "A"), (1, "B")):
        rows = (data.row_domain == code).nonzero().squeeze(-1)[:sample_size]
        sub = data.batch(rows)
        with torch.no_grad():
            _, _, parts = model(sub)
        gates = parts["gates"][domain].cpu().numpy()
        matrices[domain] = gates
        np.save(out / f"gates_{domain}.npy", gates)
        fig, ax = plt.subplots(figsize=(8, 4))
        im = ax.imshow(gates, aspect="auto", vmin=0.0, vmax=1.0, cmap="coolwarm")
        ax.set_xlabel("dimension")
        ax.set_ylabel("user")
        ax.set_title(f"Fusion gate values, domain {domain}")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(out / f"gates_{domain}.png", dpi=120)
        plt.close(fig)
    return matrices


def run_suite(name: str, base: RunConfig, seeds=(0, 1, 2)):
    if name == "ablation":
        return run_ablation(base, seeds)
    if name == "noise":
        return run_noise(base, seeds)
    if name == "buckets":
        return run_buckets(base)
    if name == "semantic":
        return run_semantic(base, seeds)
    if name == "intervals":
        return run_intervals(base)
    raise ValueError(f"unknown suite {name!r}; valid: {sorted(SUITES)}")
