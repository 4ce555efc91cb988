"""Instance tensorization: padded per-view tensors plus semantic vectors.

Each instance contributes one row; the three sequence views (domain A,
domain B, chronological merge) are padded on the right to the configured
length. Semantic prompt vectors (original, small perturbation, big
perturbation) are looked up through the embedding cache and attached per
view. All derived randomness (counterfactual prompts) is seeded per
instance, so featurization is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ModelConfig, derive_seed
from .data import Instance, InteractionLog
from .encoder import month_index
from .semantic import EmbeddingCache, PromptSequence, build_prompt, encode_prompts, perturb
from .temporal import GapBucketizer, GapTokenVocab, IntervalNormalizer

VIEWS = ("A", "B", "M")


@dataclass
class ViewTensors:
    items: torch.Tensor       # [B, N] long, 0 = padding
    abs_idx: torch.Tensor     # [B, N] long
    buckets: torch.Tensor     # [B, N] long
    norm_gaps: torch.Tensor   # [B, N] float
    mask: torch.Tensor        # [B, N] bool
    flags: torch.Tensor       # [B, N] long, 0 = domain A, 1 = domain B
    lengths: torch.Tensor     # [B] long
    sem: torch.Tensor | None = None        # [B, D_LLM]
    sem_small: torch.Tensor | None = None
    sem_big: torch.Tensor | None = None

    def slice(self, idx: torch.Tensor) -> "ViewTensors":
        pick = lambda t: None if t is None else t[idx]
        return ViewTensors(*(pick(getattr(self, f)) for f in (
            "items", "abs_idx", "buckets", "norm_gaps", "mask", "flags",
            "lengths", "sem", "sem_small", "sem_big")))


@dataclass
class FeaturizedData:
    views: dict[str, ViewTensors]
    row_domain: torch.Tensor          # [B] long, 0 = A-target, 1 = B-target
    targets: torch.Tensor             # [B] long, per-domain item index
    negatives: torch.Tensor | None    # [B, k] long, evaluation only
    keys: list[tuple[str, str, int]]  # (user_id, domain, target_ts) per row
    raw_sem_dim: int = 0

    def __len__(self) -> int:
        return len(self.keys)

    def batch(self, idx: torch.Tensor) -> "FeaturizedData":
        return FeaturizedData(
            views={v: t.slice(idx) for v, t in self.views.items()},
            row_domain=self.row_domain[idx],
            targets=self.targets[idx],
            negatives=None if self.negatives is None else self.negatives[idx],
            keys=[self.keys[i] for i in idx.tolist()],
            raw_sem_dim=self.raw_sem_dim,
        )


@dataclass
class FeaturizerContext:
    """Everything featurization needs beyond the instances themselves."""

    log: InteractionLog
    delta_max: dict[str, int]         # per view
    t0: int
    model_cfg: ModelConfig
    vocab: GapTokenVocab = field(default_factory=GapTokenVocab)
    encoder: object | None = None
    cache: EmbeddingCache | None = None
    cf_seed: int = 0

    def __post_init__(self):
        self.bucketizer = GapBucketizer(
            self.model_cfg.bucket_scale, self.model_cfg.bucket_count
        )
        self.normalizers = {
            v: IntervalNormalizer(max(self.delta_max[v], 1)) for v in VIEWS
        }
        self._id_of = {
            d: {idx: iid for iid, idx in self.log.item_index[d].items()}
            for d in ("A", "B")
        }

    def item_id(self, domain: str, idx: int) -> str:
        return self._id_of[domain][idx]


def _view_events(inst: Instance, view: str) -> list[tuple[int, str, int]]:
    if view == "A":
        return [(idx, "A", ts) for idx, ts in inst.history.seq_a]
    if view == "B":
        return [(idx, "B", ts) for idx, ts in inst.history.seq_b]
    return list(inst.history.seq_m)


def _view_gaps(inst: Instance, view: str) -> list[int]:
    return {"A": inst.history.gaps_a, "B": inst.history.gaps_b,
            "M": inst.history.gaps_m}[view]


def view_prompt(ctx: FeaturizerContext, inst: Instance, view: str) -> PromptSequence | None:
    events = _view_events(inst, view)
    if not events:
        return None
    domains = [d for _, d, _ in events]
    titles = [ctx.log.title_of(d, idx) for idx, d, _ in events]
    item_ids = [ctx.item_id(d, idx) for idx, d, _ in events]
    return build_prompt(domains, titles, item_ids, _view_gaps(inst, view), ctx.vocab)


def featurize(instances: list[Instance], ctx: FeaturizerContext,
              need_semantic: bool = False, time_mode: str = "gap_tokens",
              dtype: torch.dtype = torch.float32) -> FeaturizedData:
    n = ctx.model_cfg.max_len
    b = len(instances)
    n_items_a = ctx.log.n_items("A")
    views = {}
    prompt_texts: dict[str, list[list[str]]] = {v: [[], [], []] for v in VIEWS}

    for view in VIEWS:
        items = np.zeros((b, n), dtype=np.int64)
        abs_idx = np.zeros((b, n), dtype=np.int64)
        buckets = np.zeros((b, n), dtype=np.int64)
        norm_gaps = np.zeros((b, n), dtype=np.float64)
        mask = np.zeros((b, n), dtype=bool)
        flags = np.zeros((b, n), dtype=np.int64)
        normalizer = ctx.normalizers[view]
        for i, inst in enumerate(instances):
            events = _view_events(inst, view)
            gaps = _view_gaps(inst, view)
            length = len(events)
            for j, (idx, dom, ts) in enumerate(events):
                items[i, j] = idx if (view != "M" or dom == "A") else n_items_a + idx
                abs_idx[i, j] = month_index(ts, ctx.t0, ctx.model_cfg.abs_time_slots)
                buckets[i, j] = ctx.bucketizer.discretize(gaps[j])
                norm_gaps[i, j] = normalizer.normalize(max(gaps[j], -1))
                flags[i, j] = 0 if dom == "A" else 1
            mask[i, :length] = True
            if need_semantic:
                prompt = view_prompt(ctx, inst, view)
                if prompt is None:
                    prompt_texts[view][0].append("")
                    prompt_texts[view][1].append("")
                    prompt_texts[view][2].append("")
                else:
                    small = perturb(
                        prompt, "small", ctx.model_cfg.alpha_small, ctx.vocab,
                        derive_seed(ctx.cf_seed, "cf", inst.user_id,
                                    inst.target_domain, inst.target_ts, view, "small"),
                    )
                    big = perturb(
                        prompt, "big", ctx.model_cfg.alpha_big, ctx.vocab,
                        derive_seed(ctx.cf_seed, "cf", inst.user_id,
                                    inst.target_domain, inst.target_ts, view, "big"),
                    )
                    prompt_texts[view][0].append(prompt.render(time_mode))
                    prompt_texts[view][1].append(small.render(time_mode, original=prompt))
                    prompt_texts[view][2].append(big.render(time_mode, original=prompt))
        views[view] = ViewTensors(
            items=torch.from_numpy(items),
            abs_idx=torch.from_numpy(abs_idx),
            buckets=torch.from_numpy(buckets),
            norm_gaps=torch.from_numpy(norm_gaps).to(dtype),
            mask=torch.from_numpy(mask),
            flags=torch.from_numpy(flags),
            lengths=torch.from_numpy(mask.sum(axis=1).astype(np.int64)),
        )

    raw_dim = 0
    if need_semantic:
        if ctx.encoder is None:
            raise ValueError("semantic featurization requires a text encoder")
        for view in VIEWS:
            arrays = []
            for variant_texts in prompt_texts[view]:
                vecs = _encode_with_blanks(variant_texts, ctx)
                arrays.append(torch.from_numpy(vecs).to(dtype))
            views[view].sem, views[view].sem_small, views[view].sem_big = arrays
            raw_dim = arrays[0].shape[1]

    return FeaturizedData(
        views=views,
        row_domain=torch.tensor(
            [0 if inst.target_domain == "A" else 1 for inst in instances],
            dtype=torch.long,
        ),
        targets=torch.tensor([inst.target_item for inst in instances], dtype=torch.long),
        negatives=(
            torch.tensor([inst.negatives for inst in instances], dtype=torch.long)
            if instances and instances[0].negatives is not None
            else None
        ),
        keys=[(inst.user_id, inst.target_domain, inst.target_ts) for inst in instances],
        raw_sem_dim=raw_dim,
    )


def _encode_with_blanks(texts: list[str], ctx: FeaturizerContext) -> np.ndarray:
    """Encode prompts; empty strings (empty views) become zero vectors."""
    real = [t for t in texts if t]
    dim = getattr(ctx.encoder, "dim", None)
    if real:
        encoded = encode_prompts(real, ctx.encoder, ctx.cache)
        dim = encoded.shape[1]
    elif dim is None:
        dim = 1
    out = np.zeros((len(texts), dim))
    j = 0
    for i, t in enumerate(texts):
        if t:
            out[i] = encoded[j]
            j += 1
    return out


def training_corpus(instances: list[Instance], ctx: FeaturizerContext,
                    time_mode: str = "gap_tokens") -> np.ndarray:
    """Original-prompt encodings of the training instances, all views pooled;
    the PCA fitting corpus."""
    texts = []
    for inst in instances:
        for view in VIEWS:
            prompt = view_prompt(ctx, inst, view)
            if prompt is not None:
                texts.append(prompt.render(time_mode))
    if not texts:
        raise ValueError("no prompts available to build a training corpus")
    return encode_prompts(texts, ctx.encoder, ctx.cache)
