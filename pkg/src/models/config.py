"""
Run configuration models

Everything a run depends on lives in RunConfig, so a persisted config.json
reproduces its run exactly. The desk profile is the default; full_profile()
returns the published hyperparameters for reference runs.
"""

import json
import os
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator

load_dotenv()

FamilyKind = Literal["modular-map", "copy", "reverse", "marker-classification"]
AblationMode = Literal["craft", "task-wise", "all-in-one", "task-similar-noreg"]


class BackboneConfig(BaseModel):
    num_layers: int = Field(2, gt=0)
    hidden_dim: int = Field(32, gt=0)
    num_heads: int = Field(4, gt=0)
    vocab_size: int = Field(64, gt=0)
    max_seq_len: int = Field(64, gt=0)
    init_seed: int = 0
    mlp_ratio: int = Field(4, gt=0)
    ln_eps: float = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


class InterventionConfig(BaseModel):
    rank: int = Field(8, gt=0)
    t_pos: int = Field(3, gt=0)
    layers: Optional[List[int]] = None  # None = every layer


class RouterParams(BaseModel):
    delta: float = Field(0.7, ge=0)
    epsilon: float = Field(0.01, gt=0)
    warmup_steps: int = Field(100, ge=1)
    wu_seed: int = 1234
    top_k: int = Field(32, gt=0)
    smoothing: float = Field(1e-6, gt=0, lt=1)
    probe_size: int = Field(16, gt=0)
    warmup_lr: Optional[float] = Field(1e-3, ge=0)  # brief warm-up; None = train.lr


class TrainConfig(BaseModel):
    beta: float = Field(0.3, ge=0)
    eta: Optional[float] = None  # None = calibrate before the run
    eta_multiplier: float = Field(3.0, gt=0)
    epochs: int = Field(10, gt=0)
    epoch_schedule: Optional[List[int]] = None  # per-task override, stream order
    lr: float = Field(1e-2, ge=0)
    warmup_ratio: float = Field(0.05, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    rolling_window: int = Field(16, ge=1)
    plateau_tol: float = Field(1e-4, ge=0)
    early_stop: bool = True
    batch_size: int = Field(8, gt=0)

    def epochs_for(self, task_index: int) -> int:
        if self.epoch_schedule and task_index < len(self.epoch_schedule):
            return self.epoch_schedule[task_index]
        return self.epochs


class FamilySpec(BaseModel):
    kind: FamilyKind
    count: int = Field(2, ge=1)
    params: Dict[str, int] = Field(default_factory=dict)


def _default_families() -> List[FamilySpec]:
    return [
        FamilySpec(kind="modular-map"),
        FamilySpec(kind="copy"),
        FamilySpec(kind="reverse"),
        FamilySpec(kind="marker-classification"),
    ]


class StreamConfig(BaseModel):
    families: List[FamilySpec] = Field(default_factory=_default_families)
    stream_seed: int = 7
    train_size: int = Field(128, ge=2)
    probe_size: int = Field(16, ge=1)
    heldout_size: int = Field(24, ge=1)
    order_seed: Optional[int] = None  # permute the generated order when set


class SeedConfig(BaseModel):
    global_seed: int = 0
    data_seed: int = 17


class RunConfig(BaseModel):
    profile: Literal["desk", "full"] = "desk"
    mode: AblationMode = "craft"
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    intervention: InterventionConfig = Field(default_factory=InterventionConfig)
    router: RouterParams = Field(default_factory=RouterParams)
    train: TrainConfig = Field(default_factory=TrainConfig)
    stream: StreamConfig = Field(default_factory=StreamConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    output_dir: str = Field(
        default_factory=lambda: os.path.join(os.getenv("CRAFT_OUTPUT_DIR", "runs"), "latest")
    )

    @classmethod
    def full_profile(cls, **overrides) -> "RunConfig":
        """Published hyperparameters (ranks, positions, optimiser schedule, router)"""
        config = cls(
            profile="full",
            intervention=InterventionConfig(rank=8, t_pos=15),
            router=RouterParams(delta=0.7, epsilon=0.01, warmup_steps=100, warmup_lr=None),
            train=TrainConfig(
                beta=0.3, lr=2e-4, batch_size=4, rolling_window=20,
                warmup_ratio=0.05, epoch_schedule=[5, 4, 7, 5, 4, 5, 5, 7],
            ),
        )
        return apply_overrides(config, overrides) if overrides else config

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.model_dump_json(indent=2))

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.model_validate_json(f.read())


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """
    Apply dotted-key overrides, e.g. {"router.delta": 0.5} or
    ["train.beta=0", "stream.families=[...]"]. Values given as strings are
    parsed as JSON when possible.
    """
    if isinstance(overrides, dict):
        items = list(overrides.items())
    else:
        items = []
        for entry in overrides:
            if "=" not in entry:
                raise ValueError(f"Override must look like key.path=value, got {entry!r}")
            key, raw = entry.split("=", 1)
            items.append((key.strip(), raw.strip()))

    data: Dict[str, Any] = config.model_dump()
    for key, value in items:
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ValueError(f"Unknown config section {part!r} in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"Unknown config key {key!r}")
        node[parts[-1]] = value
    return RunConfig.model_validate(data)
