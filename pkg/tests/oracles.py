"""Independent reference implementations used to verify the pipeline.

Deliberately written with different machinery than the code under test:
sorting-based ranking, covariance eigendecomposition for PCA, hand-rolled
recurrence equations, brute-force softmax sums, and central finite
differences for gradients.
"""

import math

import numpy as np
import torch


def brute_force_rank_metrics(scores, positive_index, cutoffs=(1, 5, 10)):
    """Rank by explicit pessimistic sort: the positive goes after every
    candidate with a score >= its own."""
    scores = list(map(float, scores))
    pos = scores[positive_index]
    rank = 1
    for i, s in enumerate(scores):
        if i == positive_index:
            continue
        if s >= pos:
            rank += 1
    out = {"mrr": 1.0 / rank}
    for k in cutoffs:
        out[f"hr@{k}"] = 1.0 if rank <= k else 0.0
        out[f"ndcg@{k}"] = 1.0 / math.log2(rank + 1) if rank <= k else 0.0
    return out


def eig_pca(corpus: np.ndarray, d_mid: int):
    """PCA via eigendecomposition of the sample covariance matrix."""
    centered = corpus - corpus.mean(axis=0)
    cov = centered.T @ centered / max(len(corpus) - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    return eigvals[order][:d_mid], eigvecs[:, order][:, :d_mid]


def hand_gru(e, h, cell):
    """Evaluate the gated recurrent update from its weight matrices directly."""
    e = np.asarray(e, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    w = {k: v.detach().numpy().astype(np.float64) for k, v in cell.state_dict().items()}
    eh = np.concatenate([e, h])
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    r = sig(w["reset.weight"] @ eh + w["reset.bias"])
    u = sig(w["update.weight"] @ eh + w["update.bias"])
    c = np.tanh(w["cand_in.weight"] @ e + w["cand_in.bias"] + w["cand_hid.weight"] @ (r * h))
    return (1.0 - u) * h + u * c


def refined_euler(h0: np.ndarray, step: float, deriv, substeps: int):
    """Explicit Euler over `substeps` equal sub-intervals of the same step."""
    h = h0.astype(np.float64).copy()
    sub = step / substeps
    for _ in range(substeps):
        h = h + sub * deriv(h)
    return h


def central_differences(loss_fn, params, n_coords=6, h=1e-6, seed=0):
    """Sample coordinates of each parameter tensor and estimate the gradient
    by central finite differences of the scalar loss."""
    rng = np.random.default_rng(seed)
    estimates = []
    for p in params:
        flat = p.detach().reshape(-1)
        k = min(n_coords, flat.numel())
        coords = rng.choice(flat.numel(), size=k, replace=False)
        grads = []
        for c in coords:
            with torch.no_grad():
                orig = float(flat[c])
                flat[c] = orig + h
                up = float(loss_fn())
                flat[c] = orig - h
                down = float(loss_fn())
                flat[c] = orig
            grads.append((up - down) / (2 * h))
        estimates.append((coords, np.array(grads)))
    return estimates


def relative_gradient_error(loss_fn, params, n_coords=6, h=1e-6, seed=0):
    """Max relative disagreement between autograd and central differences."""
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None
                else torch.zeros_like(p) for p in params]
    fd = central_differences(loss_fn, params, n_coords=n_coords, h=h, seed=seed)
    worst = 0.0
    for a, (coords, g_fd) in zip(analytic, fd):
        g_an = a.reshape(-1)[coords].numpy()
        denom = np.maximum(np.maximum(np.abs(g_an), np.abs(g_fd)), 1e-6)
        worst = max(worst, float(np.max(np.abs(g_an - g_fd) / denom)))
    return worst
