"""Embedding tables and the per-view sequence encoder.

Item, absolute-time, and relative-time embeddings are summed per position
(additive fusion); a single pre-norm causal transformer layer then produces
instantaneous per-event preference vectors. Index 0 of every table is the
padding row, pinned at zero via padding_idx.
"""

from __future__ import annotations

from datetime import datetime, timezone

import torch
from torch import nn

VIEWS = ("A", "B", "M")


def month_index(timestamp: int, t0: int, slots: int) -> int:
    """Absolute-time slot: calendar months since the dataset start, 1-based.

    Clamps to the last slot so late test-time events stay in range.
    """
    d0 = datetime.fromtimestamp(t0, tz=timezone.utc)
    dt = datetime.fromtimestamp(timestamp, tz=timezone.utc)
    months = (dt.year - d0.year) * 12 + (dt.month - d0.month)
    return max(1, min(months + 1, slots - 1))


class EmbeddingTables(nn.Module):
    """Per-domain and mixed item tables plus absolute/relative time tables.

    The relative-time lookup shifts bucket indices by +1 because bucket 0 is a
    legitimate gap bucket while table row 0 is the padding row.
    """

    def __init__(self, n_items_a: int, n_items_b: int, d: int,
                 abs_time_slots: int = 512, bucket_count: int = 64):
        super().__init__()
        self.n_items_a = n_items_a
        self.n_items_b = n_items_b
        self.d = d
        self.item_a = nn.Embedding(n_items_a + 1, d, padding_idx=0)
        self.item_b = nn.Embedding(n_items_b + 1, d, padding_idx=0)
        self.item_m = nn.Embedding(n_items_a + n_items_b + 1, d, padding_idx=0)
        self.abs_time = nn.Embedding(abs_time_slots, d, padding_idx=0)
        self.rel_time = nn.Embedding(bucket_count + 1, d, padding_idx=0)

    def item_table(self, view: str) -> nn.Embedding:
        return {"A": self.item_a, "B": self.item_b, "M": self.item_m}[view]

    def forward(self, view: str, items: torch.Tensor, abs_idx: torch.Tensor,
                gap_buckets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Sum of the three embeddings; padded positions are exactly zero."""
        table = self.item_table(view)
        if int(items.max()) >= table.num_embeddings:
            raise IndexError(
                f"item index {int(items.max())} out of range for view {view}"
            )
        rel_idx = (gap_buckets + 1) * mask.long()
        out = table(items) + self.abs_time(abs_idx * mask.long()) + self.rel_time(rel_idx)
        return out * mask.unsqueeze(-1).to(out.dtype)


class SequenceEncoder(nn.Module):
    """One causal pre-norm transformer layer mapping embedded events to
    instantaneous preference vectors. Masked positions yield zero rows."""

    def __init__(self, d: int, n_heads: int = 2, dropout: float = 0.0):
        super().__init__()
        self.layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=n_heads,
            dim_feedforward=4 * d,
            dropout=dropout,
            batch_first=True,
            norm_first=True,
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        n = x.shape[1]
        causal = torch.triu(
            torch.ones((n, n), dtype=torch.bool, device=x.device), diagonal=1
        )
        # all-padding rows would make every key masked; keep their self-key
        # visible and zero the rows afterwards instead
        key_pad = ~mask
        safe_pad = key_pad & mask.any(dim=1, keepdim=True)
        out = self.layer(x, src_mask=causal, src_key_padding_mask=safe_pad)
        return out * mask.unsqueeze(-1).to(out.dtype)
