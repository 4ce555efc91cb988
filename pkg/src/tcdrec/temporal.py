"""Time transforms shared across the model.

Three views of an inter-event gap (integer seconds, sentinel -1 at sequence
start):

* ``GapBucketizer`` — log-scale integer buckets feeding the relative-time
  embedding table.
* ``IntervalNormalizer`` — log-scale map to [0, 1] driving the continuous-time
  evolution steps.
* ``GapTokenVocab`` — a small duration-token vocabulary for text prompts,
  partitioned into short/medium/long groups for counterfactual perturbation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

HOUR = 3600
DAY = 86400
WEEK = 7 * DAY

SEQ_START = "[SEQ_START]"

# (token, upper bound in seconds, exclusive); last bound is +inf
_TOKEN_BOUNDS = [
    ("<1h", HOUR),
    ("1h-1d", DAY),
    ("1-3d", 3 * DAY),
    ("3-7d", WEEK),
    ("1-4w", 4 * WEEK),
    ("1-3mo", 90 * DAY),
    ("3-12mo", 365 * DAY),
    (">1yr", math.inf),
]

TOKEN_GROUPS = {
    "short": ("<1h", "1h-1d", "1-3d"),
    "medium": ("3-7d", "1-4w"),
    "long": ("1-3mo", "3-12mo", ">1yr"),
}


@dataclass(frozen=True)
class GapBucketizer:
    """Logarithmic gap discretization: min(floor(scale * log2(gap + 2)), n - 1)."""

    scale: float = 2.0
    bucket_count: int = 64

    def discretize(self, gap: int) -> int:
        if gap < -1:
            raise ValueError(f"gap must be >= -1, got {gap}")
        return min(int(self.scale * math.log2(gap + 2)), self.bucket_count - 1)


@dataclass(frozen=True)
class IntervalNormalizer:
    """Maps gaps to [0, 1] by log2(gap + 2) / log2(max_gap + 2).

    ``max_gap`` is computed on the training split; larger test-time gaps
    clamp to 1.
    """

    max_gap: int

    def __post_init__(self):
        if self.max_gap < 1:
            raise ValueError(f"max_gap must be >= 1, got {self.max_gap}")

    def normalize(self, gap: int) -> float:
        if gap < -1:
            raise ValueError(f"gap must be >= -1, got {gap}")
        return min(math.log2(gap + 2) / math.log2(self.max_gap + 2), 1.0)


class GapTokenVocab:
    """Duration tokens for prompts plus the sequence-start sentinel token.

    Duration tokens partition [0, inf) by the bounds table above; each belongs
    to exactly one of three groups (short / medium / long).
    """

    def __init__(self):
        self.duration_tokens = tuple(tok for tok, _ in _TOKEN_BOUNDS)
        self.tokens = (SEQ_START,) + self.duration_tokens
        self._group_of = {
            tok: group for group, toks in TOKEN_GROUPS.items() for tok in toks
        }
        assert set(self._group_of) == set(self.duration_tokens)

    def gap_to_token(self, gap: int) -> str:
        if gap == -1:
            return SEQ_START
        if gap < -1:
            raise ValueError(f"gap must be >= -1, got {gap}")
        for token, bound in _TOKEN_BOUNDS:
            if gap < bound:
                return token
        raise AssertionError("unreachable: bounds cover [0, inf)")

    def token_group(self, token: str) -> str:
        if token == SEQ_START:
            raise ValueError(f"{SEQ_START} has no duration group")
        if token not in self._group_of:
            raise ValueError(f"unknown gap token {token!r}")
        return self._group_of[token]

    def group_members(self, group: str) -> tuple[str, ...]:
        return TOKEN_GROUPS[group]

    def config_hash(self) -> str:
        """Hash of boundaries/groups; cached text encodings are keyed on it."""
        payload = {
            "bounds": [[tok, b if b != math.inf else "inf"] for tok, b in _TOKEN_BOUNDS],
            "groups": {g: list(t) for g, t in TOKEN_GROUPS.items()},
            "seq_start": SEQ_START,
        }
        blob = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def format_exact_days(gap: int) -> str:
    """Raw day-count rendering used by the exact-time prompt variant."""
    if gap == -1:
        return SEQ_START
    days = round(gap / DAY)
    return f"{days} day" if days == 1 else f"{days} days"
