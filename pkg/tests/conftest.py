import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

from tcdrec.config import ModelConfig, RunConfig, SynthConfig  # noqa: E402
from tcdrec.data import Interaction, build_log  # noqa: E402


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(d=16, batch_size=32, epochs=3, max_len=10, d_mid=12,
                       eval_negatives=30, targets_per_user=2, patience=5,
                       learning_rate=0.01)


def tiny_run_config(tmp_path, **overrides) -> RunConfig:
    model = ModelConfig(d=16, batch_size=64, epochs=3, max_len=10, d_mid=12,
                        eval_negatives=30, targets_per_user=2, patience=5,
                        learning_rate=0.01)
    synth = SynthConfig(users=24, items_a=60, items_b=60, horizon_days=40,
                        mean_gap_days_a=1.0, mean_gap_days_b=2.5, seed=7)
    cfg = RunConfig(model=model, synthetic=synth, output_dir=str(tmp_path / "out"))
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def make_log(rows):
    """rows: (user, item, domain, ts[, title]) tuples."""
    events = []
    for row in rows:
        user, item, domain, ts = row[:4]
        title = row[4] if len(row) > 4 else f"{domain}/t/{item}"
        events.append(Interaction(user, item, domain, ts, title))
    return build_log(events)


@pytest.fixture
def three_event_log():
    return make_log([
        ("u1", "i1", "A", 10),
        ("u1", "i2", "B", 20),
        ("u1", "i3", "A", 35),
    ])
