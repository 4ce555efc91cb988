"""Full recommender assembly and ablation variant wiring.

The forward pass runs, per view, embedding -> causal transformer ->
continuous-time evolution, projects cached prompt encodings through the
semantic adapter, pools cross-domain preference factors, derives transfer
weights, and scores both domain vocabularies. Ablation variants switch
components off by construction (absent modules, not disabled flags at
runtime), so e.g. the non-semantic variants never touch a text encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .encoder import EmbeddingTables, SequenceEncoder
from .evolution import DualTrackEvolution, SingleTrackEvolution
from .features import FeaturizedData
from .semantic import SemanticAdapter
from .transfer import PatternEncoder, TransferGate, preference_factors

VIEWS = ("A", "B", "M")


@dataclass(frozen=True)
class VariantSpec:
    name: str
    dual: bool = True                 # long/short decoupling + fusion gate
    semantic: bool = True             # prompt-derived preference branch
    cf_loss: bool = True              # counterfactual ranking objective
    adaptive_transfer: bool = True    # learned per-user transfer weights
    ode_reg: bool = True              # long/short temporal regularizers
    time_mode: str = "gap_tokens"


_VARIANTS = {
    "full": VariantSpec("full"),
    "v1": VariantSpec("V1", dual=False, semantic=False, cf_loss=False,
                      adaptive_transfer=False, ode_reg=False),
    "v2": VariantSpec("V2", semantic=False, cf_loss=False, adaptive_transfer=False),
    "v3": VariantSpec("V3", cf_loss=False, adaptive_transfer=False),
    "v4": VariantSpec("V4", adaptive_transfer=False),
    "v5": VariantSpec("V5", time_mode="exact_days"),
}
_ALIASES = {
    "single-ode": "v1",
    "dual-ls-ode": "v2",
    "+semantic": "v3",
    "+cf-enhance": "v4",
    "exact-time": "v5",
}


def build_variant(name: str) -> VariantSpec:
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in _VARIANTS:
        valid = sorted(_VARIANTS) + sorted(_ALIASES)
        raise ValueError(f"unknown variant {name!r}; valid names: {valid}")
    return _VARIANTS[key]


class CrossDomainRecommender(nn.Module):
    def __init__(self, n_items_a: int, n_items_b: int, cfg: ModelConfig,
                 variant: VariantSpec = _VARIANTS["full"],
                 pca: tuple[np.ndarray, np.ndarray] | None = None):
        super().__init__()
        self.cfg = cfg
        self.variant = variant
        self.n_items = {"A": n_items_a, "B": n_items_b}
        d = cfg.d
        self.tables = EmbeddingTables(
            n_items_a, n_items_b, d, cfg.abs_time_slots, cfg.bucket_count
        )
        self.encoders = nn.ModuleDict(
            {v: SequenceEncoder(d, cfg.n_heads, cfg.dropout) for v in VIEWS}
        )
        evolution_cls = DualTrackEvolution if variant.dual else SingleTrackEvolution
        self.evolutions = nn.ModuleDict({v: evolution_cls(d) for v in VIEWS})
        if variant.semantic:
            if pca is None:
                raise ValueError("semantic variants need a fitted projection")
            components, mean = pca
            self.adapter = SemanticAdapter(components, mean, d, cfg.adapter_hidden)
        else:
            self.adapter = None
        if variant.adaptive_transfer:
            self.pattern_encoder = PatternEncoder(
                d, cfg.bucket_count, cfg.max_len, cfg.n_heads, cfg.dropout
            )
            self.transfer_gate = TransferGate(d)
        else:
            self.pattern_encoder = None
            self.transfer_gate = None
        self.head = nn.ModuleDict({
            "A": nn.Linear(d, n_items_a + 1, bias=False),
            "B": nn.Linear(d, n_items_b + 1, bias=False),
        })

    @staticmethod
    def _last_real(seq: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        idx = (lengths - 1).clamp(min=0)
        rows = torch.arange(seq.shape[0], device=seq.device)
        out = seq[rows, idx]
        return out * (lengths > 0).unsqueeze(-1).to(out.dtype)

    def forward(self, batch: FeaturizedData) -> dict:
        out = {"rolls": {}, "z_last": {}, "z_llm": {}, "gates": {}}
        for view in VIEWS:
            vt = batch.views[view]
            emb = self.tables(view, vt.items, vt.abs_idx, vt.buckets, vt.mask)
            e_seq = self.encoders[view](emb, vt.mask)
            z, h_long, h_short, gates = self.evolutions[view].roll(
                e_seq, vt.norm_gaps, vt.mask
            )
            out["rolls"][view] = {"E": e_seq, "Z": z, "HL": h_long, "HS": h_short}
            out["z_last"][view] = self._last_real(z, vt.lengths)
            out["gates"][view] = self._last_real(gates, vt.lengths)
            if self.adapter is not None:
                out["z_llm"][view] = {
                    "orig": self.adapter(vt.sem),
                    "small": self.adapter(vt.sem_small),
                    "big": self.adapter(vt.sem_big),
                }

        mixed = batch.views["M"]
        z_llm_m = out["z_llm"]["M"]["orig"] if self.adapter is not None else None
        r_a, r_b = preference_factors(
            out["rolls"]["M"]["Z"], mixed.flags, mixed.mask, z_llm_m
        )
        out["r"] = {"A": r_a, "B": r_b}

        if self.transfer_gate is not None:
            u = {
                view: self.pattern_encoder(
                    batch.views[view].flags, batch.views[view].buckets,
                    batch.views[view].mask,
                )
                for view in VIEWS
            }
            w_a, w_b = self.transfer_gate(u["A"], u["B"], u["M"], r_a, r_b)
            out["u"] = u
        else:
            ones = torch.ones(len(batch), dtype=r_a.dtype, device=r_a.device)
            w_a, w_b = 0.5 * ones, 0.5 * ones
        out["w"] = {"A": w_a, "B": w_b}

        logits = {}
        for domain, r_d, w_d in (("A", r_a, w_a), ("B", r_b, w_b)):
            o_d = out["z_last"][domain]
            if self.adapter is not None:
                o_d = o_d + out["z_llm"][domain]["orig"]
            fused = w_d.unsqueeze(-1) * o_d + (1.0 - w_d).unsqueeze(-1) * r_d
            scores = self.head[domain](fused)
            pad_col = torch.zeros(scores.shape[1], dtype=torch.bool, device=scores.device)
            pad_col[0] = True  # padding index is never a valid item
            logits[domain] = scores.masked_fill(pad_col, float("-inf"))
        out["logits"] = logits
        return logits["A"], logits["B"], out

    def predict(self, batch: FeaturizedData) -> dict[str, torch.Tensor]:
        """Softmax probability vectors over each domain vocabulary."""
        logits_a, logits_b, _ = self.forward(batch)
        return {
            "A": torch.softmax(logits_a, dim=-1),
            "B": torch.softmax(logits_b, dim=-1),
        }
