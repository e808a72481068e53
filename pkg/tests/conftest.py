import os
import tempfile

os.environ.setdefault("CRAFT_LOG_DIR", tempfile.mkdtemp(prefix="craft-logs-"))

import numpy as np
import pytest

from src.models.backbone import build_backbone
from src.models.config import (
    BackboneConfig, FamilySpec, InterventionConfig, RouterParams, RunConfig, StreamConfig, TrainConfig,
)
from src.services.tasks import stream_from_config


def _numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of x (x is perturbed in place and restored)"""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        original = x[i]
        x[i] = original + eps
        up = f()
        x[i] = original - eps
        down = f()
        x[i] = original
        grad[i] = (up - down) / (2 * eps)
    return grad


@pytest.fixture
def numeric_grad():
    return _numeric_grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_backbone_config():
    return BackboneConfig(num_layers=2, hidden_dim=16, num_heads=2, vocab_size=16, max_seq_len=12, init_seed=5)


@pytest.fixture
def small_backbone(small_backbone_config):
    return build_backbone(small_backbone_config)


@pytest.fixture
def tiny_config(tmp_path):
    return RunConfig(
        backbone=BackboneConfig(num_layers=2, hidden_dim=16, num_heads=2, vocab_size=64,
                                max_seq_len=16, init_seed=3),
        intervention=InterventionConfig(rank=2, t_pos=2),
        router=RouterParams(warmup_steps=8, probe_size=8, warmup_lr=None),
        train=TrainConfig(epochs=2, batch_size=8, rolling_window=2, eta=10.0),
        stream=StreamConfig(
            families=[
                FamilySpec(kind="modular-map", count=1),
                FamilySpec(kind="marker-classification", count=1),
                FamilySpec(kind="copy", count=1),
            ],
            train_size=16, probe_size=8, heldout_size=8,
        ),
        output_dir=str(tmp_path / "run"),
    )


@pytest.fixture
def tiny_backbone(tiny_config):
    return build_backbone(tiny_config.backbone)


@pytest.fixture
def tiny_tasks(tiny_config):
    return stream_from_config(tiny_config.stream, tiny_config.seeds.data_seed)
