"""Interaction-log ingestion and dataset assembly.

Covers parsing JSON-lines logs, per-user sequence construction over two
domains plus their chronological merge, user-level splits, negative sampling,
synthetic log generation, training-noise injection, interval-variance
bucketing, and interval-ratio analytics.

All functions are pure in (inputs, seed) and bit-reproducible under a fixed
seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SynthConfig, derive_seed
from .temporal import DAY, WEEK

logger = logging.getLogger(__name__)

DOMAINS = ("A", "B")


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    domain: str       # "A" or "B"
    timestamp: int    # seconds since epoch
    title: str | None = None

    def sort_key(self):
        return (self.user_id, self.timestamp, self.domain, self.item_id)


@dataclass
class InteractionLog:
    """Sorted event list plus per-domain dense item vocabularies.

    Item indices are 1-based; index 0 is reserved for padding everywhere
    downstream. Titles are an item property (first seen wins).
    """

    events: list[Interaction] = field(default_factory=list)
    item_index: dict[str, dict[str, int]] = field(
        default_factory=lambda: {"A": {}, "B": {}}
    )
    titles: dict[str, dict[int, str]] = field(
        default_factory=lambda: {"A": {}, "B": {}}
    )

    def n_items(self, domain: str) -> int:
        return len(self.item_index[domain])

    def index_of(self, domain: str, item_id: str) -> int:
        return self.item_index[domain][item_id]

    def title_of(self, domain: str, item_idx: int) -> str | None:
        return self.titles[domain].get(item_idx)


@dataclass
class UserSequences:
    """Per-user event views: domain A, domain B, and their chronological merge.

    seq_a / seq_b hold (item_index, timestamp); seq_m holds
    (item_index, domain, timestamp) with per-domain item indices. Gap lists are
    aligned with their sequences; position 0 carries the -1 start sentinel and
    gaps[k] = t_k - t_{k-1} for k >= 1.
    """

    user_id: str
    seq_a: list[tuple[int, int]] = field(default_factory=list)
    seq_b: list[tuple[int, int]] = field(default_factory=list)
    seq_m: list[tuple[int, str, int]] = field(default_factory=list)
    gaps_a: list[int] = field(default_factory=list)
    gaps_b: list[int] = field(default_factory=list)
    gaps_m: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    valid: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not math.isclose(self.train + self.valid + self.test, 1.0, abs_tol=1e-9):
            raise ValueError("split fractions must sum to 1")


@dataclass
class Instance:
    """One (history, target) pair; negatives present only for evaluation."""

    user_id: str
    target_domain: str
    target_item: int          # per-domain index
    target_ts: int
    history: UserSequences
    negatives: list[int] | None = None


def _register_event(log: InteractionLog, ev: Interaction) -> None:
    table = log.item_index[ev.domain]
    if ev.item_id not in table:
        table[ev.item_id] = len(table) + 1
    idx = table[ev.item_id]
    if ev.title is not None and idx not in log.titles[ev.domain]:
        log.titles[ev.domain][idx] = ev.title


def build_log(events: list[Interaction]) -> InteractionLog:
    """Sort events canonically, enforce uniqueness, assign dense item indices."""
    log = InteractionLog(events=sorted(events, key=Interaction.sort_key))
    seen = set()
    for ev in log.events:
        key = (ev.user_id, ev.item_id, ev.timestamp)
        if key in seen:
            raise ValueError(f"duplicate interaction {key}")
        seen.add(key)
        _register_event(log, ev)
    return log


def parse_interactions(path: str | Path) -> InteractionLog:
    """Parse a JSON-lines interaction file into a sorted, indexed log."""
    path = Path(path)
    events = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                ev = Interaction(
                    user_id=str(obj["user_id"]),
                    item_id=str(obj["item_id"]),
                    domain=obj["domain"],
                    timestamp=int(obj["timestamp"]),
                    title=obj.get("title"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed interaction line: {exc}") from exc
            if ev.domain not in DOMAINS:
                raise ValueError(
                    f"{path}:{lineno}: unknown domain {ev.domain!r} (expected one of {DOMAINS})"
                )
            if ev.timestamp < 0:
                raise ValueError(f"{path}:{lineno}: negative timestamp {ev.timestamp}")
            events.append(ev)
    return build_log(events)


def write_interactions(log: InteractionLog, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for ev in log.events:
            obj = {
                "user_id": ev.user_id,
                "item_id": ev.item_id,
                "domain": ev.domain,
                "timestamp": ev.timestamp,
            }
            if ev.title is not None:
                obj["title"] = ev.title
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _gaps(timestamps: list[int]) -> list[int]:
    if not timestamps:
        return []
    return [-1] + [timestamps[k] - timestamps[k - 1] for k in range(1, len(timestamps))]


def sequences_from_events(user_id: str, events: list[Interaction],
                          log: InteractionLog, max_len: int) -> UserSequences:
    """Build the three views from one user's canonically sorted events."""
    ordered = sorted(events, key=Interaction.sort_key)
    seq = UserSequences(user_id=user_id)
    seq.seq_a = [(log.index_of("A", e.item_id), e.timestamp) for e in ordered if e.domain == "A"]
    seq.seq_b = [(log.index_of("B", e.item_id), e.timestamp) for e in ordered if e.domain == "B"]
    seq.seq_m = [(log.index_of(e.domain, e.item_id), e.domain, e.timestamp) for e in ordered]
    # truncate each view independently to the most recent max_len events
    seq.seq_a = seq.seq_a[-max_len:]
    seq.seq_b = seq.seq_b[-max_len:]
    seq.seq_m = seq.seq_m[-max_len:]
    seq.gaps_a = _gaps([t for _, t in seq.seq_a])
    seq.gaps_b = _gaps([t for _, t in seq.seq_b])
    seq.gaps_m = _gaps([t for _, _, t in seq.seq_m])
    return seq


def build_user_sequences(log: InteractionLog, max_len: int) -> dict[str, UserSequences]:
    """Group the log by user; users with fewer than 3 mixed events are dropped."""
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    by_user: dict[str, list[Interaction]] = {}
    for ev in log.events:
        by_user.setdefault(ev.user_id, []).append(ev)
    out = {}
    dropped = 0
    for user_id in sorted(by_user):
        events = by_user[user_id]
        if len(events) < 3:
            dropped += 1
            continue
        out[user_id] = sequences_from_events(user_id, events, log, max_len)
    if dropped:
        logger.info("dropped %d users with < 3 mixed-domain interactions", dropped)
    return out


def split_dataset(sequences: dict[str, UserSequences],
                  spec: SplitSpec) -> tuple[list[str], list[str], list[str]]:
    """User-level disjoint split; deterministic under spec.seed."""
    users = sorted(sequences)
    if len(users) < 3:
        raise ValueError(f"need at least 3 users to build 3 partitions, got {len(users)}")
    rng = np.random.default_rng(spec.seed)
    order = [users[i] for i in rng.permutation(len(users))]
    n = len(users)
    n_valid = round(spec.valid * n)
    n_test = round(spec.test * n)
    n_train = n - n_valid - n_test
    return (
        sorted(order[:n_train]),
        sorted(order[n_train:n_train + n_valid]),
        sorted(order[n_train + n_valid:]),
    )


def sample_negatives(target: int, domain_items: int, history_items: set[int],
                     k: int, seed: int) -> list[int]:
    """k distinct same-domain negatives, excluding the target and the user's history."""
    pool = np.array(
        [i for i in range(1, domain_items + 1) if i != target and i not in history_items],
        dtype=np.int64,
    )
    if len(pool) < k:
        raise ValueError(
            f"only {len(pool)} candidate negatives available; "
            f"reduce eval_negatives below {k} for this dataset"
        )
    rng = np.random.default_rng(seed)
    return [int(x) for x in rng.choice(pool, size=k, replace=False)]


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def generate_synthetic(cfg: SynthConfig, seed: int | None = None) -> InteractionLog:
    """Simulate a two-domain interaction log with drifting user preferences.

    Each domain has topic-structured items in a shared latent space; a user
    carries a slowly drifting base preference per domain plus a fast-decaying
    session interest boosted toward recently consumed topics. Seasonal items
    gain affinity only inside their active window. Item choice is a softmax
    over latent affinity.
    """
    if cfg.users <= 0 or cfg.items_a <= 0 or cfg.items_b <= 0:
        raise ValueError("users and per-domain item counts must be positive")
    if cfg.topics <= 0 or cfg.latent_dim <= 0:
        raise ValueError("topics and latent_dim must be positive")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(derive_seed(seed, "synthetic"))

    horizon = cfg.horizon_days * DAY
    items: dict[str, dict] = {}
    for domain, count in (("A", cfg.items_a), ("B", cfg.items_b)):
        prototypes = rng.normal(size=(cfg.topics, cfg.latent_dim))
        prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
        topic_of = rng.integers(0, cfg.topics, size=count)
        vecs = prototypes[topic_of] + 0.35 * rng.normal(size=(count, cfg.latent_dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        n_seasonal = int(round(cfg.seasonal_frac * count))
        seasonal = np.zeros(count, dtype=bool)
        if n_seasonal:
            seasonal[rng.choice(count, size=n_seasonal, replace=False)] = True
        win_start = rng.uniform(
            0, max(horizon - cfg.seasonal_window_days * DAY, 1.0), size=count
        )
        items[domain] = {
            "vecs": vecs,
            "topic": topic_of,
            "prototypes": prototypes,
            "seasonal": seasonal,
            "win_start": win_start,
            "win_end": win_start + cfg.seasonal_window_days * DAY,
        }

    mean_gap = {"A": cfg.mean_gap_days_a, "B": cfg.mean_gap_days_b}
    events: list[Interaction] = []
    for u in range(cfg.users):
        user_id = f"u{u:05d}"
        core = rng.normal(size=cfg.latent_dim)
        for domain in DOMAINS:
            it = items[domain]
            pref = _unit(core + 0.5 * rng.normal(size=cfg.latent_dim))
            session = np.zeros(cfg.latent_dim)
            t = rng.uniform(0, 10 * DAY)
            n_events = 0
            while n_events < cfg.max_events_per_domain:
                gap_days = rng.lognormal(math.log(mean_gap[domain]), cfg.gap_sigma)
                t += gap_days * DAY
                if t >= horizon:
                    break
                # preference drift between events, Brownian in elapsed time
                if cfg.drift_rate > 0:
                    pref = _unit(
                        pref
                        + cfg.drift_rate
                        * math.sqrt(gap_days)
                        * rng.normal(size=cfg.latent_dim)
                    )
                session = session * math.exp(-gap_days / cfg.session_half_life_days)
                affinity = cfg.choice_temp * (it["vecs"] @ (pref + session))
                if it["seasonal"].any():
                    in_window = it["seasonal"] & (t >= it["win_start"]) & (t < it["win_end"])
                    out_window = it["seasonal"] & ~in_window
                    affinity = affinity + cfg.seasonal_boost * in_window - cfg.seasonal_boost * out_window
                probs = np.exp(affinity - affinity.max())
                probs /= probs.sum()
                choice = int(rng.choice(len(probs), p=probs))
                session = session + cfg.session_boost * it["prototypes"][it["topic"][choice]]
                ts = cfg.start_epoch + int(t)
                item_id = f"{domain.lower()}{choice:05d}"
                title = f"{domain}/topic{it['topic'][choice]:02d}/{item_id}"
                events.append(Interaction(user_id, item_id, domain, ts, title))
                n_events += 1

    # the (user, item, timestamp) key must be unique; drop the rare collision
    seen = set()
    unique = []
    for ev in sorted(events, key=Interaction.sort_key):
        key = (ev.user_id, ev.item_id, ev.timestamp)
        if key in seen:
            continue
        seen.add(key)
        unique.append(ev)
    return build_log(unique)


def inject_noise(log: InteractionLog, train_users: list[str], ratio: float,
                 seed: int) -> InteractionLog:
    """Insert uniformly random (user, item, timestamp) events for train users.

    Inserts round(ratio * n_train_events) events; the timestamp range is the
    training events' [min, max]. Returns a rebuilt log.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"noise ratio must be in [0, 1], got {ratio}")
    train_set = set(train_users)
    train_events = [ev for ev in log.events if ev.user_id in train_set]
    n_insert = round(ratio * len(train_events))
    if n_insert == 0:
        return log
    ts_lo = min(ev.timestamp for ev in train_events)
    ts_hi = max(ev.timestamp for ev in train_events)
    rng = np.random.default_rng(derive_seed(seed, "noise"))
    users = sorted(train_set)
    existing = {(ev.user_id, ev.item_id, ev.timestamp) for ev in log.events}
    # reverse item-vocab lookup so noise events reuse real item ids and titles
    id_of = {d: {idx: iid for iid, idx in log.item_index[d].items()} for d in DOMAINS}
    inserted = []
    while len(inserted) < n_insert:
        user = users[int(rng.integers(0, len(users)))]
        domain = DOMAINS[int(rng.integers(0, 2))]
        idx = int(rng.integers(1, log.n_items(domain) + 1))
        ts = int(rng.integers(ts_lo, ts_hi + 1))
        item_id = id_of[domain][idx]
        key = (user, item_id, ts)
        if key in existing:
            continue
        existing.add(key)
        inserted.append(Interaction(user, item_id, domain, ts, log.title_of(domain, idx)))
    noisy = InteractionLog(
        events=sorted(log.events + inserted, key=Interaction.sort_key),
        item_index={d: dict(log.item_index[d]) for d in DOMAINS},
        titles={d: dict(log.titles[d]) for d in DOMAINS},
    )
    return noisy


# ---------------------------------------------------------------------------
# instance construction
# ---------------------------------------------------------------------------

def _user_events(log: InteractionLog) -> dict[str, list[Interaction]]:
    by_user: dict[str, list[Interaction]] = {}
    for ev in log.events:
        by_user.setdefault(ev.user_id, []).append(ev)
    return by_user


def build_instances(log: InteractionLog, users: list[str], max_len: int,
                    targets_per_user: int = 1) -> list[Instance]:
    """Next-item instances: each domain-D event with >= 2 prior events becomes
    a target with the full cross-domain prefix as history.

    targets_per_user caps targets per (user, domain) to the most recent ones;
    0 means all valid positions. Evaluation uses targets_per_user=1
    (leave-last-out per domain).
    """
    by_user = _user_events(log)
    instances = []
    for user_id in sorted(users):
        events = sorted(by_user.get(user_id, []), key=Interaction.sort_key)
        if len(events) < 3:
            continue
        for domain in DOMAINS:
            positions = [i for i, ev in enumerate(events) if ev.domain == domain and i >= 2]
            if targets_per_user > 0:
                positions = positions[-targets_per_user:]
            for pos in positions:
                target = events[pos]
                history = sequences_from_events(user_id, events[:pos], log, max_len)
                instances.append(
                    Instance(
                        user_id=user_id,
                        target_domain=domain,
                        target_item=log.index_of(domain, target.item_id),
                        target_ts=target.timestamp,
                        history=history,
                    )
                )
    return instances


def attach_negatives(instances: list[Instance], log: InteractionLog, k: int,
                     seed: int) -> None:
    """Draw fixed per-instance negatives (shared across models under one seed)."""
    for inst in instances:
        history_items = {
            idx for idx, dom, _ in inst.history.seq_m if dom == inst.target_domain
        }
        inst.negatives = sample_negatives(
            inst.target_item,
            log.n_items(inst.target_domain),
            history_items,
            k,
            derive_seed(seed, "negatives", inst.user_id, inst.target_domain,
                        inst.target_ts),
        )


# ---------------------------------------------------------------------------
# analytics
# ---------------------------------------------------------------------------

def bucket_by_interval_variance(instances: list[Instance],
                                n_buckets: int = 3) -> dict[tuple[str, str, int], int]:
    """Assign each instance a bucket id by the variance of its history gaps.

    Population variance over the mixed-view gaps (start sentinel excluded);
    bucket 0 holds the most uniform sequences. Ties break on user id, then
    domain and timestamp. Histories with < 2 usable gaps go to bucket 0.
    """
    keyed = []
    forced_zero = []
    for inst in instances:
        key = (inst.user_id, inst.target_domain, inst.target_ts)
        gaps = [g for g in inst.history.gaps_m[1:]]
        if len(gaps) < 2:
            forced_zero.append(key)
            continue
        keyed.append((float(np.var(gaps)), key))
    if forced_zero:
        logger.info("%d sequences with < 2 usable gaps assigned bucket 0", len(forced_zero))
    keyed.sort(key=lambda pair: (pair[0],) + pair[1])
    assignment = {key: 0 for key in forced_zero}
    chunks = np.array_split(np.arange(len(keyed)), n_buckets)
    for bucket, chunk in enumerate(chunks):
        for i in chunk:
            assignment[keyed[i][1]] = bucket
    return assignment


INTERVAL_BINS = ("<=1d", "1d-1w", ">1w")


def analyze_intervals(log: InteractionLog) -> dict[str, dict[str, float]]:
    """Per-domain proportions of adjacent same-domain gaps in day/week bins."""
    if not log.events:
        raise ValueError("empty interaction log")
    by_user = _user_events(log)
    counts = {d: np.zeros(3, dtype=np.int64) for d in DOMAINS}
    for events in by_user.values():
        for domain in DOMAINS:
            ts = sorted(e.timestamp for e in events if e.domain == domain)
            for a, b in zip(ts, ts[1:]):
                gap = b - a
                counts[domain][0 if gap <= DAY else (1 if gap <= WEEK else 2)] += 1
    table = {}
    for domain in DOMAINS:
        total = counts[domain].sum()
        if total == 0:
            logger.warning("domain %s has < 2 interactions per user; omitted", domain)
            continue
        table[domain] = {
            name: float(c) / float(total) for name, c in zip(INTERVAL_BINS, counts[domain])
        }
    return table
