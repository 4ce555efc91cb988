"""Time-aware semantic preference generation.

Interaction histories are rendered as prompts interleaving domain tokens,
item titles, and discrete gap tokens; a pluggable text encoder maps prompts
to fixed vectors; a frozen PCA plus a trainable adapter projects them into
the model space. Counterfactual prompt pairs perturb gap tokens within
(small) or across (big) duration groups, and a ranking objective makes the
projected vectors robust to small timing changes while staying sensitive to
large ones.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .temporal import SEQ_START, GapTokenVocab, format_exact_days

logger = logging.getLogger(__name__)

PROMPT_PREFIX = (
    "You will act as a time-aware preference interpreter. Please extract the "
    "time-aware semantic preferences from the following interaction sequence:"
)

TIME_MODES = ("gap_tokens", "exact_days", "none")


# representative day counts used when a perturbed token must be rendered as
# an exact duration
TOKEN_DAYS = {
    "<1h": 0, "1h-1d": 1, "1-3d": 2, "3-7d": 5,
    "1-4w": 14, "1-3mo": 60, "3-12mo": 180, ">1yr": 400,
}


@dataclass(frozen=True)
class PromptSequence:
    """Structured prompt: per-interaction (domain token, title) entries, the
    vocabulary gap tokens between consecutive interactions, and the raw gap
    seconds they came from. Perturbation edits gap_tokens only; rendering
    decides how (or whether) the temporal tokens appear as text."""

    entries: tuple[tuple[str, str], ...]      # (domain token, title)
    gap_tokens: tuple[str, ...]               # len(entries) - 1, may be empty
    gap_seconds: tuple[int, ...]              # raw gaps aligned with gap_tokens
    prefix: str = PROMPT_PREFIX

    def render(self, time_mode: str = "gap_tokens",
               original: "PromptSequence | None" = None) -> str:
        if time_mode not in TIME_MODES:
            raise ValueError(f"unknown time mode {time_mode!r}")
        parts = [self.prefix]
        for i, (domain_token, title) in enumerate(self.entries):
            if i > 0 and time_mode != "none":
                token = self.gap_tokens[i - 1]
                if time_mode == "gap_tokens":
                    parts.append(f"[{token}]")
                else:
                    # exact durations: keep the true day count for untouched
                    # tokens, a representative one for replaced tokens
                    untouched = original is None or token == original.gap_tokens[i - 1]
                    if untouched:
                        parts.append(f"[{format_exact_days(self.gap_seconds[i - 1])}]")
                    else:
                        days = TOKEN_DAYS[token]
                        parts.append(f"[{days} day]" if days == 1 else f"[{days} days]")
            parts.append(domain_token)
            parts.append(title)
        return " ".join(parts)


def build_prompt(domains: list[str], titles: list[str | None],
                 item_ids: list[str], gaps: list[int],
                 vocab: GapTokenVocab) -> PromptSequence:
    """Build one history's prompt structure. Gap tokens sit between
    interactions; the final interaction carries no trailing token. Missing
    titles fall back to the item id."""
    if not domains:
        raise ValueError("cannot build a prompt from an empty sequence")
    entries = []
    for domain, title, item_id in zip(domains, titles, item_ids):
        if title is None:
            logger.debug("missing title for %s/%s; using item id", domain, item_id)
            title = item_id
        entries.append((f"[{domain}_Domain]", title))
    return PromptSequence(
        entries=tuple(entries),
        gap_tokens=tuple(vocab.gap_to_token(g) for g in gaps[1:]),
        gap_seconds=tuple(gaps[1:]),
    )


def perturb(prompt: PromptSequence, mode: str, alpha: float,
            vocab: GapTokenVocab, seed: int) -> PromptSequence:
    """Replace each duration gap token independently with probability alpha.

    small: uniform over the other tokens of the same group; big: uniform over
    the tokens of the other two groups. Titles, domain tokens, and the start
    sentinel are never touched.
    """
    if mode not in ("small", "big"):
        raise ValueError(f"perturbation mode must be 'small' or 'big', got {mode!r}")
    rng = np.random.default_rng(seed)
    new_tokens = []
    for token in prompt.gap_tokens:
        if token == SEQ_START or token not in vocab.duration_tokens:
            new_tokens.append(token)
            continue
        if rng.random() >= alpha:
            new_tokens.append(token)
            continue
        group = vocab.token_group(token)
        if mode == "small":
            candidates = [t for t in vocab.group_members(group) if t != token]
            if not candidates:
                logger.debug("group %s has a single token; %r left unchanged", group, token)
                new_tokens.append(token)
                continue
        else:
            candidates = [t for t in vocab.duration_tokens
                          if vocab.token_group(t) != group]
        new_tokens.append(candidates[int(rng.integers(0, len(candidates)))])
    return replace(prompt, gap_tokens=tuple(new_tokens))


# ---------------------------------------------------------------------------
# text encoders
# ---------------------------------------------------------------------------

_TOKEN_SPLIT = re.compile(r"[ /]+")


class HashTextEncoder:
    """Deterministic stand-in encoder: seeded-hash expansion of the prompt.

    Each whitespace/slash token maps to a fixed pseudo-random unit vector
    (seeded by its hash); the prompt vector is the position-weighted sum with
    mild recency emphasis, normalized. Compositional by construction, so
    prompts sharing tokens get correlated vectors and a one-token change
    shifts the output.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.name = "hash-stub"
        self.version = f"hash-v1-d{dim}-s{seed}"
        self._token_vecs: dict[str, np.ndarray] = {}
        self.calls = 0

    def _token_vec(self, token: str) -> np.ndarray:
        vec = self._token_vecs.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._token_vecs[token] = vec
        return vec

    def encode(self, text: str) -> np.ndarray:
        self.calls += 1
        tokens = [t.strip("[]").strip() for t in _TOKEN_SPLIT.split(text)]
        tokens = [t for t in tokens if t]
        if not tokens:
            return np.zeros(self.dim)
        out = np.zeros(self.dim)
        n = len(tokens)
        for i, token in enumerate(tokens):
            weight = 0.5 + 1.0 * (i + 1) / n
            out += weight * self._token_vec(token)
        norm = np.linalg.norm(out)
        return out / norm if norm > 0 else out


class RemoteTextEncoder:
    """JSON-over-HTTP embedding client: POST {"text": ...} -> {"embedding": [...]}.

    Endpoint and auth come from TCDREC_ENCODER_URL / TCDREC_ENCODER_TOKEN
    unless given explicitly. Retries transient failures a bounded number of
    times.
    """

    def __init__(self, url: str | None = None, token: str | None = None,
                 name: str = "remote", version: str = "v1",
                 retries: int = 3, timeout: float = 30.0):
        import requests

        self.url = url or os.environ.get("TCDREC_ENCODER_URL")
        if not self.url:
            raise ValueError("remote encoder needs a URL (TCDREC_ENCODER_URL)")
        self.token = token or os.environ.get("TCDREC_ENCODER_TOKEN")
        self.name = name
        self.version = version
        self.retries = retries
        self.timeout = timeout
        self._session = requests.Session()
        self.calls = 0

    def encode(self, text: str) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error = None
        for attempt in range(self.retries):
            try:
                self.calls += 1
                resp = self._session.post(
                    self.url, json={"text": text}, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                return np.asarray(resp.json()["embedding"], dtype=np.float64)
            except Exception as exc:  # noqa: BLE001 - bounded retry then surface
                last_error = exc
                time.sleep(min(0.2 * 2**attempt, 2.0))
        raise RuntimeError(f"remote encoder failed after {self.retries} attempts: {last_error}")


def make_encoder(backend: str, stub_dim: int = 64, stub_seed: int = 0):
    if backend == "stub":
        return HashTextEncoder(dim=stub_dim, seed=stub_seed)
    if backend == "remote":
        return RemoteTextEncoder()
    raise ValueError(f"unknown encoder backend {backend!r}")


# ---------------------------------------------------------------------------
# embedding cache
# ---------------------------------------------------------------------------

class CacheMismatch(Exception):
    """Cache header disagrees with the active encoder or vocabulary."""


class EmbeddingCache:
    """Append-only prompt-embedding cache keyed by prompt hash.

    Line 1 is a JSON header recording the encoder name/version and the gap
    vocabulary hash; every further line is one {"k": ..., "v": [...]} record.
    Corrupt or mismatched files are discarded and rebuilt.
    """

    def __init__(self, path, encoder_name: str, encoder_version: str, vocab_hash: str):
        from pathlib import Path

        self.path = Path(path)
        self.header = {
            "schema": 1,
            "encoder": encoder_name,
            "version": encoder_version,
            "vocab_hash": vocab_hash,
        }
        self._store: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self._load()

    @staticmethod
    def key(text: str) -> str:
        return hashlib.sha256(text.encode()).hexdigest()

    def _load(self) -> None:
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w") as fh:
                fh.write(json.dumps(self.header, sort_keys=True) + "\n")
            return
        try:
            with self.path.open() as fh:
                header = json.loads(fh.readline())
                if header != self.header:
                    raise CacheMismatch(f"cache header mismatch at {self.path}")
                for line in fh:
                    rec = json.loads(line)
                    self._store[rec["k"]] = np.asarray(rec["v"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, CacheMismatch) as exc:
            logger.warning("rebuilding corrupt/mismatched cache %s (%s)", self.path, exc)
            self._store.clear()
            with self.path.open("w") as fh:
                fh.write(json.dumps(self.header, sort_keys=True) + "\n")

    def get(self, text: str) -> np.ndarray | None:
        return self._store.get(self.key(text))

    def put(self, text: str, vector: np.ndarray) -> None:
        key = self.key(text)
        with self._lock:
            if key in self._store:
                return
            self._store[key] = np.asarray(vector, dtype=np.float64)
            with self.path.open("a") as fh:
                fh.write(json.dumps({"k": key, "v": list(map(float, vector))}) + "\n")

    def __len__(self) -> int:
        return len(self._store)


def encode_prompts(texts: list[str], encoder, cache: EmbeddingCache | None = None,
                   max_workers: int = 4) -> np.ndarray:
    """Encode prompts through the write-once cache; misses run concurrently."""
    results: dict[int, np.ndarray] = {}
    misses = []
    for i, text in enumerate(texts):
        vec = cache.get(text) if cache is not None else None
        if vec is not None:
            results[i] = vec
        else:
            misses.append(i)
    if misses:
        unique: dict[str, list[int]] = {}
        for i in misses:
            unique.setdefault(texts[i], []).append(i)
        ordered = list(unique)
        if max_workers > 1 and len(ordered) > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                vectors = list(pool.map(encoder.encode, ordered))
        else:
            vectors = [encoder.encode(t) for t in ordered]
        for text, vec in zip(ordered, vectors):
            if cache is not None:
                cache.put(text, vec)
            for i in unique[text]:
                results[i] = np.asarray(vec, dtype=np.float64)
    return np.stack([results[i] for i in range(len(texts))])


# ---------------------------------------------------------------------------
# projection: frozen PCA + trainable adapter
# ---------------------------------------------------------------------------

def fit_pca(corpus: np.ndarray, d_mid: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-d_mid principal components of the centered corpus.

    Returns (components [D, d_mid] with orthonormal columns, mean [D]).
    """
    n, dim = corpus.shape
    if n < d_mid:
        raise ValueError(
            f"corpus of {n} encodings cannot support d_mid={d_mid}; "
            f"lower model.d_mid to at most {n}"
        )
    if dim < d_mid:
        raise ValueError(f"encoder dimension {dim} < d_mid={d_mid}; lower model.d_mid")
    mean = corpus.mean(axis=0)
    _, _, vt = np.linalg.svd(corpus - mean, full_matrices=False)
    return vt[:d_mid].T.copy(), mean


class SemanticAdapter(nn.Module):
    """Frozen PCA projection followed by a trainable two-layer perceptron.

    The projection is the bare orthonormal map v @ C (components fitted on the
    centered training corpus, but applied without re-centering, so the zero
    vector projects to zero). The corpus mean is kept only as diagnostics.
    """

    def __init__(self, components: np.ndarray, mean: np.ndarray, d: int,
                 hidden: int = 0):
        super().__init__()
        d_mid = components.shape[1]
        hidden = hidden or d
        self.register_buffer("components", torch.as_tensor(components))
        self.register_buffer("mean", torch.as_tensor(mean))
        self.net = nn.Sequential(
            nn.Linear(d_mid, hidden),
            nn.Tanh(),
            nn.Linear(hidden, d),
        )

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        if raw.shape[-1] != self.mean.shape[0]:
            raise ValueError(
                f"encoder vector dim {raw.shape[-1]} != fitted dim {self.mean.shape[0]}"
            )
        reduced = raw @ self.components.to(raw.dtype)
        return self.net(reduced)


# ---------------------------------------------------------------------------
# counterfactual ranking objective
# ---------------------------------------------------------------------------

def counterfactual_loss(z: torch.Tensor, z_small: torch.Tensor,
                        z_big: torch.Tensor, tau: float, k: int,
                        valid: torch.Tensor | None = None) -> torch.Tensor:
    """Ranking objective over (original, small, big) projected triples.

    Term 1 prefers the small perturbation over the big one; term 2 prefers
    the big perturbation over the mean similarity to the K most similar other
    rows in the batch. Rows flagged invalid (histories without gap tokens)
    are excluded.
    """
    if valid is not None:
        z, z_small, z_big = z[valid], z_small[valid], z_big[valid]
    b = z.shape[0]
    if b == 0:
        return torch.zeros((), dtype=z.dtype, device=z.device)
    zn = F.normalize(z, dim=-1, eps=1e-8)
    s_small = (zn * F.normalize(z_small, dim=-1, eps=1e-8)).sum(-1)
    s_big = (zn * F.normalize(z_big, dim=-1, eps=1e-8)).sum(-1)
    loss1 = F.softplus(-(s_small - s_big) / tau).mean()
    if b < 2:
        logger.debug("batch of %d rows has no counterfactual negatives", b)
        return loss1
    if k > b - 1:
        logger.debug("lowering counterfactual top-k from %d to %d", k, b - 1)
        k = b - 1
    sims = zn @ zn.T
    eye = torch.eye(b, dtype=torch.bool, device=z.device)
    sims = sims.masked_fill(eye, float("-inf"))
    top_k = sims.topk(k, dim=1).values
    s_neg = top_k.mean(dim=1)
    loss2 = F.softplus(-(s_big - s_neg) / tau).mean()
    return loss1 + loss2
