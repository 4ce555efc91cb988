"""Time-preference guided domain transfer.

Per-user temporal patterns (domain flag + discretized gap per event) are
encoded with a small attention encoder into fixed vectors; cross-domain
preference factors pool the mixed-sequence step representations by item
domain and add the mixed semantic vector. A gated network turns both signals
into per-domain scalar transfer weights in (0, 1).
"""

from __future__ import annotations

import logging

import torch
from torch import nn

logger = logging.getLogger(__name__)


class PatternEncoder(nn.Module):
    """Self-attention encoder over (domain flag, gap bucket) event pairs.

    Flags are stored 1-based (1 = domain A, 2 = domain B) so index 0 stays
    the padding row; gap buckets shift by +1 for the same reason. A learned
    positional embedding makes the encoding order-sensitive; output is the
    mean over real positions. An empty pattern encodes to the zero vector.
    """

    def __init__(self, d: int, bucket_count: int, max_len: int,
                 n_heads: int = 2, dropout: float = 0.0):
        super().__init__()
        self.flag_emb = nn.Embedding(3, d, padding_idx=0)
        self.gap_emb = nn.Embedding(bucket_count + 1, d, padding_idx=0)
        self.pos_emb = nn.Embedding(max_len + 1, d, padding_idx=0)
        self.layer = nn.TransformerEncoderLayer(
            d_model=d, nhead=n_heads, dim_feedforward=4 * d,
            dropout=dropout, batch_first=True, norm_first=True,
        )

    def forward(self, flags: torch.Tensor, gap_buckets: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        b, n = flags.shape
        m = mask.long()
        pos = torch.arange(1, n + 1, device=flags.device).unsqueeze(0) * m
        x = (
            self.flag_emb((flags + 1) * m)
            + self.gap_emb((gap_buckets + 1) * m)
            + self.pos_emb(pos)
        )
        has_real = mask.any(dim=1, keepdim=True)
        key_pad = ~mask & has_real
        out = self.layer(x, src_key_padding_mask=key_pad)
        out = out * mask.unsqueeze(-1).to(out.dtype)
        counts = mask.sum(dim=1, keepdim=True).to(out.dtype).clamp(min=1.0)
        pooled = out.sum(dim=1) / counts
        return pooled * has_real.to(out.dtype)


def preference_factors(z_mixed: torch.Tensor, flags: torch.Tensor,
                       mask: torch.Tensor,
                       z_llm_mixed: torch.Tensor | None = None):
    """Domain-conditioned pooling of mixed-sequence step representations.

    r_D = mean of the real steps whose item belongs to domain D (zero when
    the pool is empty), plus the mixed semantic vector when present. Invariant
    to row order and duplication within a domain.
    """
    factors = []
    for flag_value in (0, 1):
        sel = (mask & (flags == flag_value)).to(z_mixed.dtype).unsqueeze(-1)
        total = (z_mixed * sel).sum(dim=1)
        count = sel.sum(dim=1).clamp(min=1.0)
        pooled = total / count
        if z_llm_mixed is not None:
            pooled = pooled + z_llm_mixed
        factors.append(pooled)
    return factors[0], factors[1]


class TransferGate(nn.Module):
    """Hybrid temporal/preference gating producing scalar weights per domain.

    Domain-specific projections compress [own pattern, mixed pattern] and
    [own factor, other factor]; a shared two-layer perceptron maps the
    concatenation to a logit, squashed through a sigmoid. The weight for a
    domain never reads the other domain's pattern vector.
    """

    def __init__(self, d: int):
        super().__init__()
        self.w_t = nn.ModuleDict({k: nn.Linear(2 * d, d) for k in ("A", "B")})
        self.w_r = nn.ModuleDict({k: nn.Linear(2 * d, d) for k in ("A", "B")})
        self.gate = nn.Sequential(nn.Linear(2 * d, d), nn.Tanh(), nn.Linear(d, 1))

    def weight(self, domain: str, u_own: torch.Tensor, u_mixed: torch.Tensor,
               r_own: torch.Tensor, r_other: torch.Tensor) -> torch.Tensor:
        t_part = self.w_t[domain](torch.cat([u_own, u_mixed], dim=-1))
        r_part = self.w_r[domain](torch.cat([r_own, r_other], dim=-1))
        logit = self.gate(torch.cat([t_part, r_part], dim=-1))
        return torch.sigmoid(logit.squeeze(-1))

    def forward(self, u_a, u_b, u_m, r_a, r_b):
        w_a = self.weight("A", u_a, u_m, r_a, r_b)
        w_b = self.weight("B", u_b, u_m, r_b, r_a)
        return w_a, w_b
