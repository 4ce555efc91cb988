"""Run configuration: dataclass configs, serialization, and stable hashing.

A run is fully described by a RunConfig. Its hash (over the canonical JSON
form, excluding output paths) names artifact directories and makes commands
idempotent: re-running with the same resolved config is a no-op skip.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    """Model and optimization hyperparameters."""

    d: int = 256                  # embedding / hidden dimension
    batch_size: int = 256
    epochs: int = 100             # hard cap on training epochs
    learning_rate: float = 0.0005
    lambda1: float = 0.01         # weight of the evolution regularizers
    lambda2: float = 0.001        # weight of the counterfactual semantic loss
    tau_short: float = 0.2        # temperature, short-term alignment loss
    tau_cf: float = 0.2           # temperature, counterfactual ranking loss
    alpha_small: float = 0.3      # gap-token replacement prob, small perturbation
    alpha_big: float = 0.3        # gap-token replacement prob, big perturbation
    cf_top_k: int = 5             # K most-similar in-batch negatives
    max_len: int = 50             # sequence length cap N per view
    d_mid: int = 512              # PCA output dimension
    n_heads: int = 2
    dropout: float = 0.0
    patience: int = 10            # early stop after this many non-improving epochs
    bucket_scale: float = 2.0     # gap discretization scale a
    bucket_count: int = 64        # |P|, relative-time bucket count
    abs_time_slots: int = 512     # |T|, absolute-time table size
    eval_negatives: int = 999     # negatives per evaluation instance
    targets_per_user: int = 0     # training targets per user per domain; 0 = all prefixes
    adapter_hidden: int = 0       # semantic adapter hidden width; 0 = same as d


@dataclass
class SynthConfig:
    """Synthetic interaction-log generator parameters.

    Required keys mirror the flat key-value config file; the rest have
    defaults tuned for desk-scale experiments.
    """

    users: int = 200
    items_a: int = 500
    items_b: int = 500
    mean_gap_days_a: float = 1.5
    mean_gap_days_b: float = 4.0
    drift_rate: float = 0.15      # latent-preference random walk scale per sqrt(day)
    seasonal_frac: float = 0.2
    seed: int = 0
    horizon_days: float = 120.0
    topics: int = 10
    latent_dim: int = 16
    gap_sigma: float = 1.0        # lognormal sigma of inter-event gaps
    choice_temp: float = 4.0      # inverse temperature of the item softmax
    seasonal_window_days: float = 30.0
    seasonal_boost: float = 3.0
    session_boost: float = 0.8    # transient affinity bump toward the last topic
    session_half_life_days: float = 2.0
    start_epoch: int = 1_600_000_000
    max_events_per_domain: int = 400


@dataclass
class RunConfig:
    """One reproducible run: data source, model, encoder backend, seeds."""

    model: ModelConfig = field(default_factory=ModelConfig)
    synthetic: SynthConfig | None = field(default_factory=SynthConfig)
    interactions_path: str | None = None   # JSON-lines log; overrides synthetic
    encoder_backend: str = "stub"          # "stub" or "remote"
    stub_dim: int = 64
    stub_seed: int = 0
    noise_ratio: float = 0.0               # training-set noise injection
    variant: str = "full"
    split_seed: int = 0
    train_seed: int = 0
    negatives_seed: int = 0
    output_dir: str = "runs"


SEED_STREAMS = {
    "split": 101,
    "negatives": 211,
    "noise": 307,
    "counterfactual": 401,
    "synthetic": 503,
}


def derive_seed(base: int, stream: str, *extra: int | str) -> int:
    """Deterministic per-purpose seed derivation, stable across platforms."""
    h = hashlib.sha256()
    h.update(str(base).encode())
    h.update(b"\x00" + stream.encode())
    for e in extra:
        h.update(b"\x00" + str(e).encode())
    return int.from_bytes(h.digest()[:8], "big") % (2**63)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON; the hashing and on-disk format."""
    return json.dumps(_to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    """Stable hash of everything that affects run outputs (paths excluded)."""
    payload = _to_jsonable(cfg)
    payload.pop("output_dir", None)
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


# model fields that change dataset artifacts (splits, negatives, projections)
_DATASET_MODEL_FIELDS = (
    "max_len", "targets_per_user", "eval_negatives", "d_mid",
    "bucket_scale", "bucket_count", "abs_time_slots",
)


def dataset_hash(cfg: RunConfig) -> str:
    """Hash of the fields that determine the prepared dataset bundle.

    Variant choice, training seeds, and optimization hyperparameters do not
    enter, so ablation variants and seed repetitions share one bundle.
    """
    payload = {
        "synthetic": _to_jsonable(cfg.synthetic) if cfg.synthetic else None,
        "interactions_path": cfg.interactions_path,
        "noise_ratio": cfg.noise_ratio,
        "split_seed": cfg.split_seed,
        "negatives_seed": cfg.negatives_seed,
        "encoder_backend": cfg.encoder_backend,
        "stub_dim": cfg.stub_dim,
        "stub_seed": cfg.stub_seed,
        "model": {k: getattr(cfg.model, k) for k in _DATASET_MODEL_FIELDS},
    }
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


def save_config(cfg: RunConfig, path: Path) -> None:
    path.write_text(json.dumps(_to_jsonable(cfg), sort_keys=True, indent=2) + "\n")


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def load_config(path: Path) -> RunConfig:
    data = json.loads(Path(path).read_text())
    model = _build(ModelConfig, data.pop("model", {}))
    synth = data.pop("synthetic", None)
    synthetic = _build(SynthConfig, synth) if synth is not None else None
    cfg = _build(RunConfig, data)
    cfg.model = model
    cfg.synthetic = synthetic
    return cfg


def parse_synth_file(path: Path) -> SynthConfig:
    """Parse the flat key-value synthetic config format (`key = value` lines)."""
    fields = {f.name: f.type for f in dataclasses.fields(SynthConfig)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        default = getattr(SynthConfig(), key)
        values[key] = type(default)(float(val)) if isinstance(default, (int, float)) else val
    return SynthConfig(**values)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` CLI overrides, e.g. `model.d=32` or `variant=V2`."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        dotted, val = item.split("=", 1)
        parts = dotted.split(".")
        target = cfg
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ValueError(f"unknown config section {p!r} in {dotted!r}")
            target = getattr(target, p)
        key = parts[-1]
        if not hasattr(target, key):
            raise ValueError(f"unknown config key {dotted!r}")
        current = getattr(target, key)
        if isinstance(current, bool):
            parsed = val.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            parsed = int(val)
        elif isinstance(current, float):
            parsed = float(val)
        elif current is None:
            parsed = val
        else:
            parsed = type(current)(val)
        setattr(target, key, parsed)
    return cfg
