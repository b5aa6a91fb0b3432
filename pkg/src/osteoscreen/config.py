"""Run configuration schema.

Every section forbids unknown keys, so a typo is rejected with its full
key path (for example ``pretraining.tempreature``).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ContractError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    n: int = Field(500, ge=10)
    size: int = Field(64, ge=48)
    prevalence: float = Field(0.285, gt=0.0, lt=1.0)
    signal: float = 1.0
    seed: int = 0


class SegmentationConfig(_Section):
    K: int = Field(2, ge=1)
    S: int = Field(4, ge=1)
    L: int = Field(8, ge=1)
    F1: int = 32
    F2: int = 16
    lam: float = Field(1.0, ge=0.0)
    gamma0: float = Field(0.75, gt=0.0, le=1.0)
    anneal_fraction: float = Field(0.5, gt=0.0, le=1.0)
    epsilon: float = Field(0.01, gt=0.0)
    sinkhorn_iters: int = 200
    steps: int = 400
    batch: int = 4
    lr: float = 3e-3
    plan_cost: Literal["hard", "soft"] = "hard"


class AugmentationConfig(_Section):
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    translate_frac: tuple[float, float] = (-0.10, 0.10)
    flip_h: float = 0.5
    flip_v: float = 0.5
    brightness_frac: tuple[float, float] = (0.5, 1.5)
    contrast_frac: tuple[float, float] = (0.5, 1.5)


class ViewsConfig(_Section):
    canvas: int = 40
    n_global: int = 2
    global_size: int = 32
    n_local: int = 4
    local_size: int = 12
    min_nonzero: float = Field(0.10, ge=0.0, le=1.0)
    max_attempts: int = Field(100, ge=1)
    crop_mode: Literal["constrained", "conventional"] = "constrained"


class PretrainingConfig(_Section):
    mode: Literal["contrastive", "none"] = "contrastive"
    epochs: int = Field(4, ge=1)
    batch: int = Field(16, ge=2)
    temperature: float = Field(0.5, gt=0.0)
    base_lr: float = 0.1
    min_lr: float = 0.001
    trust_coefficient: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-5


class FinetuningConfig(_Section):
    epochs: int = 200
    lr: float = 0.05
    weight_decay: float = 1e-4
    balanced: bool = True
    eval_every: int = 10
    supervised_steps: int = 400
    supervised_batch: int = 64
    supervised_lr: float = 3e-3


class AblationConfig(_Section):
    segmentation: bool = True
    random_crops: int = 7
    random_crop_size: int = 24


class RunConfig(_Section):
    seed: int = 7
    dataset: str = "data"
    data: DataConfig = DataConfig()
    segmentation: SegmentationConfig = SegmentationConfig()
    augmentation: AugmentationConfig = AugmentationConfig()
    views: ViewsConfig = ViewsConfig()
    pretraining: PretrainingConfig = PretrainingConfig()
    finetuning: FinetuningConfig = FinetuningConfig()
    ablation: AblationConfig = AblationConfig()

    def dump(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=1, sort_keys=True)


def parse_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        path = ".".join(str(p) for p in first["loc"])
        raise ContractError(f"invalid config key '{path}': {first['msg']}") from None


def load_config(path) -> RunConfig:
    return parse_config(json.loads(Path(path).read_text()))


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Deep-merge ``overrides`` into ``cfg`` and validate the result."""
    base = cfg.model_dump(mode="json")

    def merge(dst, src, prefix=""):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                merge(dst[k], v, f"{prefix}{k}.")
            else:
                dst[k] = v

    merge(base, overrides)
    return parse_config(base)
