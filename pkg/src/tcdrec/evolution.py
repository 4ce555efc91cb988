"""Continuous-time behavioral preference evolution.

Between consecutive events a preference state drifts under a learned
derivative, integrated with a single explicit Euler step over the normalized
interval; at each event a gated recurrent cell applies the discrete update.
The dual-track variant keeps independent long-term and short-term states and
fuses them through a time-aware sigmoid gate; the single-track variant keeps
one undecoupled state.

Two regularizers shape the tracks: a smoothness penalty on consecutive
long-term states weighted by (1 - normalized interval), and an InfoNCE
alignment between each short-term state and its event's instantaneous
preference vector, with negatives pooled over all real steps in the batch.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class DerivativeNet(nn.Module):
    """Two-layer perceptron (state, normalized interval) -> state derivative."""

    def __init__(self, d: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d + 1, d),
            nn.Tanh(),
            nn.Linear(d, d),
        )

    def forward(self, h: torch.Tensor, dt: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([h, dt.unsqueeze(-1)], dim=-1))


def ode_evolve(h: torch.Tensor, dt: torch.Tensor, f) -> torch.Tensor:
    """One explicit Euler step of size dt: h + dt * f(h, dt)."""
    if not torch.isfinite(h).all():
        raise ValueError("non-finite state entering the evolution step")
    return h + dt.unsqueeze(-1) * f(h, dt)


class EventGRUCell(nn.Module):
    """Gated recurrent update applied when an interaction occurs.

    Convention: update gate u = 1 keeps the candidate, u = 0 keeps the prior
    state; h_new = (1 - u) * h + u * tanh(W_c e + U_c (r * h) + b_c).
    """

    def __init__(self, d: int):
        super().__init__()
        self.reset = nn.Linear(2 * d, d)
        self.update = nn.Linear(2 * d, d)
        self.cand_in = nn.Linear(d, d)
        self.cand_hid = nn.Linear(d, d, bias=False)

    def forward(self, e: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        eh = torch.cat([e, h], dim=-1)
        r = torch.sigmoid(self.reset(eh))
        u = torch.sigmoid(self.update(eh))
        c = torch.tanh(self.cand_in(e) + self.cand_hid(r * h))
        return (1.0 - u) * h + u * c


class FusionGate(nn.Module):
    """Time-aware convex blend of the two tracks: z = g*h_S + (1-g)*h_L."""

    def __init__(self, d: int):
        super().__init__()
        self.proj = nn.Linear(2 * d + 1, d)

    def gate(self, h_long: torch.Tensor, h_short: torch.Tensor,
             dt: torch.Tensor) -> torch.Tensor:
        x = torch.cat([h_long, h_short, dt.unsqueeze(-1)], dim=-1)
        return torch.sigmoid(self.proj(x))

    def forward(self, h_long, h_short, dt):
        g = self.gate(h_long, h_short, dt)
        return g * h_short + (1.0 - g) * h_long, g


class DualTrackEvolution(nn.Module):
    """Long/short decoupled evolution with gated fusion over a sequence."""

    def __init__(self, d: int):
        super().__init__()
        self.f_long = DerivativeNet(d)
        self.f_short = DerivativeNet(d)
        self.gru_long = EventGRUCell(d)
        self.gru_short = EventGRUCell(d)
        self.fuse = FusionGate(d)

    def roll(self, e_seq: torch.Tensor, norm_gaps: torch.Tensor,
             mask: torch.Tensor):
        """Chronological roll over a padded batch.

        e_seq: [B, N, d] instantaneous preferences; norm_gaps[t] is the
        normalized interval preceding event t; mask flags real events.
        Returns (Z, H_L, H_S, G); padded steps freeze both states and zero
        the fused output. The first step is the initialization z_1 = e_1.
        """
        b, n, d = e_seq.shape
        if n == 0:
            raise ValueError("cannot roll an empty sequence")
        m0 = mask[:, 0].unsqueeze(-1).to(e_seq.dtype)
        h_long = e_seq[:, 0] * m0
        h_short = e_seq[:, 0] * m0
        zs = [h_long]
        hls = [h_long]
        hss = [h_short]
        gates = [torch.full_like(h_long, 0.5)]
        for t in range(1, n):
            dt = norm_gaps[:, t]
            keep = mask[:, t].unsqueeze(-1).to(e_seq.dtype)
            hl_new = self.gru_long(e_seq[:, t], ode_evolve(h_long, dt, self.f_long))
            hs_new = self.gru_short(e_seq[:, t], ode_evolve(h_short, dt, self.f_short))
            z, g = self.fuse(hl_new, hs_new, dt)
            h_long = keep * hl_new + (1.0 - keep) * h_long
            h_short = keep * hs_new + (1.0 - keep) * h_short
            zs.append(z * keep)
            hls.append(h_long)
            hss.append(h_short)
            gates.append(g)
        stack = lambda xs: torch.stack(xs, dim=1)
        return stack(zs), stack(hls), stack(hss), stack(gates)


class SingleTrackEvolution(nn.Module):
    """Undecoupled variant: one state, no gate; the fused output is the state."""

    def __init__(self, d: int):
        super().__init__()
        self.f = DerivativeNet(d)
        self.gru = EventGRUCell(d)

    def roll(self, e_seq: torch.Tensor, norm_gaps: torch.Tensor,
             mask: torch.Tensor):
        b, n, d = e_seq.shape
        if n == 0:
            raise ValueError("cannot roll an empty sequence")
        h = e_seq[:, 0] * mask[:, 0].unsqueeze(-1).to(e_seq.dtype)
        zs = [h]
        for t in range(1, n):
            dt = norm_gaps[:, t]
            keep = mask[:, t].unsqueeze(-1).to(e_seq.dtype)
            h_new = self.gru(e_seq[:, t], ode_evolve(h, dt, self.f))
            h = keep * h_new + (1.0 - keep) * h
            zs.append(h * keep)
        z = torch.stack(zs, dim=1)
        return z, z, z, torch.full_like(z, 0.5)


def long_term_reg(h_long: torch.Tensor, norm_gaps: torch.Tensor,
                  mask: torch.Tensor) -> torch.Tensor:
    """Smoothness penalty sum_t (1 - dt_t) ||h_t - h_{t-1}||^2 over real steps,
    averaged over the batch. Sequences with < 2 real steps contribute 0."""
    diffs = h_long[:, 1:] - h_long[:, :-1]
    weights = (1.0 - norm_gaps[:, 1:]) * (mask[:, 1:] & mask[:, :-1]).to(h_long.dtype)
    per_seq = (weights * diffs.pow(2).sum(dim=-1)).sum(dim=1)
    return per_seq.mean()


def short_term_reg(h_short: torch.Tensor, e_seq: torch.Tensor,
                   mask: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE alignment of each real short-term state with its own event.

    Negatives are every other real event vector pooled across the batch.
    A single real pair has no negatives and contributes 0 by convention.
    """
    flat_mask = mask.reshape(-1)
    if flat_mask.sum() < 2:
        return torch.zeros((), dtype=h_short.dtype, device=h_short.device)
    hs = F.normalize(h_short.reshape(-1, h_short.shape[-1])[flat_mask], dim=-1)
    es = F.normalize(e_seq.reshape(-1, e_seq.shape[-1])[flat_mask], dim=-1)
    logits = hs @ es.T / tau
    targets = torch.arange(len(hs), device=hs.device)
    return F.cross_entropy(logits, targets)
