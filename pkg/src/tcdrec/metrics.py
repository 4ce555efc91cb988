"""Ranking metrics and evaluation reports.

Each evaluation instance scores its positive against a fixed candidate set;
ties rank the positive last among equals (pessimistic). Reports aggregate
per-domain means and optionally per-bucket breakdowns, and serialize to
stable JSON (sorted keys, no timestamps) so identical runs produce identical
bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .features import FeaturizedData

CUTOFFS = (1, 5, 10)
METRIC_NAMES = ("mrr", "ndcg@5", "ndcg@10", "hr@1", "hr@5", "hr@10")


def rank_metrics(scores, positive_index: int, cutoffs=CUTOFFS,
                 expected_len: int = 1000) -> dict[str, float]:
    """Per-instance metrics from a candidate score vector.

    The positive's rank counts every candidate scoring >= it (pessimistic
    tie-breaking). expected_len guards the protocol's 1 positive + 999
    negatives; pass the actual candidate count for smaller desk runs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != expected_len:
        raise ValueError(f"expected {expected_len} candidate scores, got {len(scores)}")
    pos = scores[positive_index]
    others = np.delete(scores, positive_index)
    rank = 1 + int((others >= pos).sum())
    out = {"mrr": 1.0 / rank}
    for k in cutoffs:
        out[f"hr@{k}"] = 1.0 if rank <= k else 0.0
        out[f"ndcg@{k}"] = 1.0 / math.log2(rank + 1) if rank <= k else 0.0
    return out


@dataclass
class MetricReport:
    domains: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    buckets: dict[str, dict[str, dict[str, float]]] | None = None
    bucket_counts: dict[str, dict[str, int]] | None = None

    def to_json(self) -> str:
        payload = {
            "schema_version": 1,
            "config_hash": self.config_hash,
            "counts": self.counts,
            "domains": self.domains,
        }
        if self.buckets is not None:
            payload["buckets"] = self.buckets
            payload["bucket_counts"] = self.bucket_counts
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        data = json.loads(text)
        return MetricReport(
            domains=data["domains"],
            counts=data["counts"],
            config_hash=data["config_hash"],
            buckets=data.get("buckets"),
            bucket_counts=data.get("bucket_counts"),
        )


def _aggregate(rows: list[dict[str, float]]) -> dict[str, float]:
    return {name: float(np.mean([r[name] for r in rows])) for name in METRIC_NAMES}


def score_instances(score_fn, data: FeaturizedData, batch_size: int = 256):
    """Yield (key, domain, per-instance metrics) using fixed negatives."""
    if data.negatives is None:
        raise ValueError("evaluation data has no negatives attached")
    n_candidates = data.negatives.shape[1] + 1
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        sub = data.batch(idx)
        logits = score_fn(sub)
        for code, domain in ((0, "A"), (1, "B")):
            rows = (sub.row_domain == code).nonzero().squeeze(-1)
            for r in rows.tolist():
                cand = torch.cat([sub.targets[r:r + 1], sub.negatives[r]])
                scores = logits[domain][r, cand].detach().cpu().numpy()
                metrics = rank_metrics(scores, 0, expected_len=n_candidates)
                yield sub.keys[r], domain, metrics


def model_score_fn(model):
    def score(sub: FeaturizedData):
        with torch.no_grad():
            logits_a, logits_b, _ = model(sub)
        return {"A": logits_a, "B": logits_b}
    return score


def evaluate(score_fn, data: FeaturizedData, config_hash: str = "",
             bucket_of: dict | None = None, batch_size: int = 256) -> MetricReport:
    """Aggregate per-instance metrics into a per-domain (and optionally
    per-bucket) report."""
    if len(data) == 0:
        raise ValueError("no evaluation instances")
    per_domain: dict[str, list[dict]] = {"A": [], "B": []}
    per_bucket: dict[str, dict[int, list[dict]]] = {"A": {}, "B": {}}
    for key, domain, metrics in score_instances(score_fn, data, batch_size):
        per_domain[domain].append(metrics)
        if bucket_of is not None:
            bucket = bucket_of[key]
            per_bucket[domain].setdefault(bucket, []).append(metrics)
    report = MetricReport(config_hash=config_hash)
    for domain, rows in per_domain.items():
        if rows:
            report.domains[domain] = _aggregate(rows)
            report.counts[domain] = len(rows)
    if bucket_of is not None:
        report.buckets = {}
        report.bucket_counts = {}
        for domain, groups in per_bucket.items():
            report.buckets[domain] = {
                str(b): _aggregate(rows) for b, rows in sorted(groups.items())
            }
            report.bucket_counts[domain] = {
                str(b): len(rows) for b, rows in sorted(groups.items())
            }
    return report
