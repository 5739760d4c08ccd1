"""Run configuration with default merging and JSON round trips."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 5


@dataclass
class VaeConfig:
    d_model: int = 128
    n_heads: int = 4
    n_enc: int = 3
    n_dec: int = 3
    latent_dim: int = 32
    kl_weight: float = 0.001
    mode: str = "inout"


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.01
    lr_decay: float = 0.02  # fraction removed per epoch
    steps_per_epoch: int = 256
    grad_clip: float = 1.0
    rotate: bool = True
    permute: bool = True
    completion_prob: float = 0.3
    floorless_prob: float = 0.1
    ema: float = 0.0  # decay of the weight average swapped in after training; 0 keeps raw weights


@dataclass
class RunConfig:
    """Everything a training or sampling run depends on.

    Full-scale values: T 1000, batch 256, 2000 epochs, lr 1e-4 with 2% decay
    per epoch.  Defaults here are desk scale.
    """

    seed: int = 0
    n_max: int = 16
    grid: tuple = (64, 64)
    meters_per_cell: float = 0.125
    T: int = 100
    vocabulary: list | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    out: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        return _merge(cls(), doc or {})

    @classmethod
    def from_json(cls, text: str | bytes) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def _merge(obj, doc: dict, path: str = ""):
    obj = copy.deepcopy(obj)
    names = {f.name: f for f in fields(obj)}
    for k, v in doc.items():
        if k not in names:
            raise ValueError(f"unknown config key {path}{k!r}")
        cur = getattr(obj, k)
        if is_dataclass(cur):
            if not isinstance(v, dict):
                raise ValueError(f"config key {path}{k} must be an object")
            setattr(obj, k, _merge(cur, v, f"{path}{k}."))
        elif k == "grid":
            setattr(obj, k, tuple(int(x) for x in v))
        else:
            setattr(obj, k, v)
    return obj
