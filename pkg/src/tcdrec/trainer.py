"""Loss assembly, the optimization loop, and checkpointing.

The objective is the per-domain next-item cross entropy plus the weighted
evolution regularizers (over views A, B, M) and the weighted counterfactual
semantic losses. Every component is logged per step and the decomposition is
validated for finiteness; a non-finite part aborts training while keeping
the last good checkpoint. Runs are bit-reproducible under fixed seeds on a
single device.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, derive_seed
from .evolution import long_term_reg, short_term_reg
from .features import FeaturizedData
from .model import CrossDomainRecommender, VariantSpec
from .semantic import counterfactual_loss

logger = logging.getLogger(__name__)

VIEWS = ("A", "B", "M")

CHECKPOINT_VERSION = 1


class NonFiniteLoss(RuntimeError):
    pass


def domain_cross_entropy(logits: dict[str, torch.Tensor], row_domain: torch.Tensor,
                         targets: torch.Tensor) -> dict[str, torch.Tensor]:
    """Mean negative log-likelihood per domain. Rows without a target in a
    domain contribute nothing to that domain's term."""
    losses = {}
    for code, domain in ((0, "A"), (1, "B")):
        rows = row_domain == code
        if rows.any():
            t = targets[rows]
            if int(t.max()) >= logits[domain].shape[1] or int(t.min()) < 1:
                raise IndexError(f"target index out of range for domain {domain}")
            losses[domain] = F.cross_entropy(logits[domain][rows], t)
        else:
            losses[domain] = torch.zeros((), dtype=logits[domain].dtype,
                                         device=logits[domain].device)
    return losses


def total_loss(l_main: torch.Tensor, l_ode: torch.Tensor, l_sem: torch.Tensor,
               lambda1: float, lambda2: float) -> torch.Tensor:
    """Weighted objective; aborts with the offending part named if non-finite."""
    for name, part in (("L_main", l_main), ("L_ODE", l_ode), ("L_sem", l_sem)):
        if not torch.isfinite(part):
            raise NonFiniteLoss(f"{name} is non-finite ({float(part)})")
    return l_main + lambda1 * l_ode + lambda2 * l_sem


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def compute_losses(model: CrossDomainRecommender, batch: FeaturizedData) -> dict:
    cfg = model.cfg
    variant = model.variant
    logits_a, logits_b, out = model(batch)
    ce = domain_cross_entropy({"A": logits_a, "B": logits_b},
                              batch.row_domain, batch.targets)
    l_main = ce["A"] + ce["B"]

    zero = torch.zeros((), dtype=l_main.dtype, device=l_main.device)
    l_ode = zero
    parts = {"L_A": _f(ce["A"]), "L_B": _f(ce["B"])}
    if variant.ode_reg:
        for view in VIEWS:
            roll = out["rolls"][view]
            vt = batch.views[view]
            l_long = long_term_reg(roll["HL"], vt.norm_gaps, vt.mask)
            l_short = short_term_reg(roll["HS"], roll["E"], vt.mask, cfg.tau_short)
            parts[f"L_L_{view}"] = _f(l_long)
            parts[f"L_S_{view}"] = _f(l_short)
            l_ode = l_ode + l_long + l_short

    l_sem = zero
    if variant.cf_loss and model.adapter is not None:
        for view in VIEWS:
            # rows whose prompt has at least one gap token to perturb
            valid = batch.views[view].lengths >= 2
            zs = out["z_llm"][view]
            l_cf = counterfactual_loss(zs["orig"], zs["small"], zs["big"],
                                       cfg.tau_cf, cfg.cf_top_k, valid=valid)
            parts[f"L_cl_{view}"] = _f(l_cf)
            l_sem = l_sem + l_cf

    loss = total_loss(l_main, l_ode, l_sem, cfg.lambda1, cfg.lambda2)
    parts.update({
        "L_main": _f(l_main), "L_ODE": _f(l_ode), "L_sem": _f(l_sem),
        "total": _f(loss),
    })
    return {"loss": loss, "parts": parts, "out": out}


def quick_mrr(model: CrossDomainRecommender, data: FeaturizedData,
              batch_size: int) -> float:
    """Mean reciprocal rank over candidate sets (positive + fixed negatives)."""
    if data.negatives is None:
        raise ValueError("validation data has no negatives attached")
    model.eval()
    ranks = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(data)))
            sub = data.batch(idx)
            logits_a, logits_b, _ = model(sub)
            logits = {"A": logits_a, "B": logits_b}
            for code, domain in ((0, "A"), (1, "B")):
                rows = (sub.row_domain == code).nonzero().squeeze(-1)
                for r in rows.tolist():
                    cand = torch.cat([sub.targets[r:r + 1], sub.negatives[r]])
                    scores = logits[domain][r, cand]
                    pos = scores[0]
                    rank = 1 + int((scores[1:] >= pos).sum())
                    ranks.append(1.0 / rank)
    model.train()
    return float(np.mean(ranks)) if ranks else 0.0


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mrr: float = -1.0
    stopped_early: bool = False


def train_model(model: CrossDomainRecommender, train_data: FeaturizedData,
                valid_data: FeaturizedData, cfg: ModelConfig, seed: int,
                history_path: Path | None = None) -> TrainResult:
    """Adam optimization with per-epoch validation MRR, early stopping, and
    best-checkpoint retention (in memory; caller persists)."""
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    result = TrainResult()
    best_state = copy.deepcopy(model.state_dict())
    bad_epochs = 0
    n = len(train_data)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            derive_seed(seed, "order", epoch)
        ).permutation(n)
        epoch_parts: dict[str, float] = {}
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            batch = train_data.batch(idx)
            res = compute_losses(model, batch)
            opt.zero_grad()
            res["loss"].backward()
            opt.step()
            steps += 1
            for k, v in res["parts"].items():
                epoch_parts[k] = epoch_parts.get(k, 0.0) + v
        means = {k: v / steps for k, v in epoch_parts.items()}
        val_mrr = quick_mrr(model, valid_data, cfg.batch_size)
        record = {"epoch": epoch, "val_mrr": val_mrr, **means}
        result.history.append(record)
        logger.info("epoch %d loss %.4f val_mrr %.4f", epoch, means["total"], val_mrr)
        if val_mrr > result.best_val_mrr:
            result.best_val_mrr = val_mrr
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                result.stopped_early = True
                break
    model.load_state_dict(best_state)
    if history_path is not None:
        history_path.parent.mkdir(parents=True, exist_ok=True)
        history_path.write_text(json.dumps(result.history, indent=2) + "\n")
    return result


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path, model: CrossDomainRecommender,
                    variant: VariantSpec, extras: dict | None = None) -> None:
    state = model.state_dict()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": vars(model.cfg).copy(),
        "variant": vars(variant).copy(),
        "n_items": dict(model.n_items),
        "state_dict": state,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "extras": extras or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path) -> tuple[CrossDomainRecommender, VariantSpec, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    cfg = ModelConfig(**payload["model_config"])
    variant = VariantSpec(**payload["variant"])
    extras = payload["extras"]
    pca = None
    if variant.semantic:
        pca = (np.asarray(extras["pca_components"]), np.asarray(extras["pca_mean"]))
    model = CrossDomainRecommender(
        payload["n_items"]["A"], payload["n_items"]["B"], cfg, variant, pca
    )
    for key, shape in payload["shapes"].items():
        if list(payload["state_dict"][key].shape) != shape:
            raise ValueError(f"checkpoint shape metadata mismatch for {key}")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, variant, extras
