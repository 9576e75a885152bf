"""
Configuration Validation Service
Pydantic schemas for every configurable type of the pipeline: split plans,
backbone and MINT head shapes, loss weights, training and experiment configs,
and the run manifest.
"""

import hashlib
import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..config.settings import DatasetSources


class StrictModel(BaseModel):
    """Base model rejecting unknown keys"""

    model_config = ConfigDict(extra="forbid", frozen=True)


class Role(str, Enum):
    """Membership role of a training-pool record"""
    MEMBER = "member"
    EXTERNAL = "external"


class MintSplit(str, Enum):
    """Whether a record feeds the MINT loss or only its evaluation"""
    FIT = "fit"
    EVAL = "eval"


class Setup(str, Enum):
    """Tap-point placement"""
    ENTRY = "entry"
    MIDDLE = "middle"
    OUTPUT = "output"


class OptimizerName(str, Enum):
    ADAM = "adam"


class StopCriterion(str, Enum):
    """Early-stopping metric"""
    JOINT = "joint"
    MINT_EVAL = "mint_eval"
    AUDITED_VAL = "audited_val"


class MethodName(str, Enum):
    """Auditing method a result row belongs to"""
    ACTIVE = "active"
    PASSIVE = "passive"
    MIA_LOSS = "mia_loss"
    MIA_CONF = "mia_conf"
    MIA_ENTROPY = "mia_entropy"


class Scale(str, Enum):
    SMOKE = "smoke"
    DESK = "desk"


# Data

class SplitPlan(StrictModel):
    """Member/external split of the training pool"""
    seed: Optional[int] = Field(None, description="Split seed; derived from the master seed when unset")
    member_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    mint_eval_fraction: float = Field(0.1, ge=0.0, lt=0.5)


class DatasetConfig(StrictModel):
    name: Literal["mnist", "cifar10"] = "mnist"
    root: Optional[Path] = Field(None, description="Dataset directory; MINT_DATA_ROOT/<name> when unset")
    download: bool = False


class SubsampleConfig(StrictModel):
    """Desk-scale reduction of D and E after splitting"""
    members: Optional[int] = Field(None, ge=0)
    externals: Optional[int] = Field(None, ge=0)


# Nets

class ConvBlockSpec(StrictModel):
    layers_per_block: int = Field(2, ge=1)
    channels: int = Field(..., gt=0)
    kernel: Literal[3] = 3
    stride: Literal[1] = 1
    pool_after_block: bool = True


class BackboneSpec(StrictModel):
    """Block structure of the audited convolutional backbone"""
    blocks: List[ConvBlockSpec]
    num_classes: int = Field(10, ge=2)
    input_shape: Tuple[int, int, int] = Field((28, 28, 1), description="H x W x C")

    @field_validator("blocks")
    @classmethod
    def validate_blocks(cls, v):
        if len(v) < 3:
            raise ValueError("backbone needs at least 3 convolutional blocks")
        for index, block in enumerate(v):
            if block.layers_per_block < 2:
                raise ValueError(f"block {index} needs at least 2 layers")
        return v

    @field_validator("input_shape")
    @classmethod
    def validate_input_shape(cls, v):
        if any(d <= 0 for d in v):
            raise ValueError("input_shape dimensions must be positive")
        return v

    @model_validator(mode="after")
    def validate_pooling_depth(self):
        height, width, _ = self.input_shape
        for block in self.blocks:
            if block.pool_after_block:
                height, width = height // 2, width // 2
            if height < 1 or width < 1:
                raise ValueError(f"input {self.input_shape} is pooled away by the backbone")
        return self

    @classmethod
    def desk_default(cls, input_shape: Tuple[int, int, int] = (28, 28, 1), num_classes: int = 10) -> "BackboneSpec":
        return cls(
            blocks=[ConvBlockSpec(channels=c) for c in (16, 32, 64)],
            num_classes=num_classes,
            input_shape=input_shape,
        )

    def fingerprint(self) -> str:
        """Stable digest used to detect tap configs built for another spec"""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


class TapConfig(StrictModel):
    setup: Setup
    taps: Tuple[Tuple[int, int], Tuple[int, int]]
    spec_fingerprint: str

    @field_validator("taps")
    @classmethod
    def validate_order(cls, v):
        if not v[0] < v[1]:
            raise ValueError("taps must be distinct and ordered by depth")
        return v

    @property
    def deepest(self) -> Tuple[int, int]:
        return self.taps[1]


class MintHeadSpec(StrictModel):
    per_path_conv_channels: List[int] = Field(default_factory=lambda: [256], min_length=1)
    dropout: float = Field(0.4, ge=0.0, lt=1.0)
    hidden_dim: int = Field(256, gt=0)

    @field_validator("per_path_conv_channels")
    @classmethod
    def validate_channels(cls, v):
        if any(c <= 0 for c in v):
            raise ValueError("conv channel counts must be positive")
        return v


# Objective and training

class LossWeights(StrictModel):
    lambda1: float = Field(1.0, gt=0.0)
    lambda2: float = Field(10.0, ge=0.0)
    l2_coeff: float = Field(1e-4, ge=0.0)

    @model_validator(mode="after")
    def validate_finite(self):
        for name in ("lambda1", "lambda2", "l2_coeff"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        return self


class TrainConfig(StrictModel):
    learning_rate: float = Field(1e-5, gt=0.0, le=1.0)
    max_epochs: int = Field(50, ge=0)
    early_stop_patience: int = Field(5, ge=0)
    batch_size: int = Field(64, ge=2)
    seed: Optional[int] = None
    weights: LossWeights = Field(default_factory=LossWeights)
    optimizer: OptimizerName = OptimizerName.ADAM
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    normalizer_momentum: float = Field(0.99, gt=0.0, lt=1.0)
    normalizer_floor: float = Field(1e-8, gt=0.0)
    audited_val_fraction: float = Field(0.1, ge=0.0, lt=0.5)
    stop_criterion: StopCriterion = StopCriterion.JOINT
    shuffle_membership: bool = False
    eval_batch_size: int = Field(256, ge=1)
    mint_fit_eval_cap: int = Field(2000, ge=2, description="Records per role scored for the FIT accuracy")

    @field_validator("batch_size")
    @classmethod
    def validate_batch_size(cls, v):
        if v % 2:
            raise ValueError("batch_size must be even (half members, half externals)")
        return v

    @model_validator(mode="after")
    def validate_patience(self):
        if self.max_epochs > 0 and self.early_stop_patience >= self.max_epochs:
            raise ValueError("early_stop_patience must be smaller than max_epochs")
        return self


class PassiveConfig(StrictModel):
    setup: Setup = Setup.ENTRY
    auto_train_audited: bool = True
    audited_checkpoint: Optional[Path] = None


class ExperimentConfig(StrictModel):
    """One experiment: dataset, split, model shapes, training and methods"""
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    subsample: SubsampleConfig = Field(default_factory=SubsampleConfig)
    split: SplitPlan = Field(default_factory=SplitPlan)
    backbone: BackboneSpec = Field(default_factory=BackboneSpec.desk_default)
    setup: Setup = Setup.ENTRY
    mint_head: MintHeadSpec = Field(default_factory=MintHeadSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    passive: PassiveConfig = Field(default_factory=PassiveConfig)
    output_dir: Path = Path("runs/experiment")
    methods: List[MethodName] = Field(
        default_factory=lambda: [MethodName.ACTIVE, MethodName.PASSIVE, MethodName.MIA_LOSS, MethodName.MIA_CONF]
    )
    seed: int = 0

    @model_validator(mode="after")
    def validate_dataset_shape(self):
        height, width, channels, num_classes = DatasetSources.SHAPES[self.dataset.name]
        if tuple(self.backbone.input_shape) != (height, width, channels):
            raise ValueError(
                f"backbone.input_shape {tuple(self.backbone.input_shape)} does not match "
                f"{self.dataset.name} images {(height, width, channels)}"
            )
        if self.backbone.num_classes != num_classes:
            raise ValueError(f"backbone.num_classes must be {num_classes} for {self.dataset.name}")
        return self

    @classmethod
    def from_yaml(cls, path: Path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
        return cls.model_validate(raw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


class RunManifest(BaseModel):
    """Everything needed to re-run an experiment bit-identically"""
    model_config = ConfigDict(extra="forbid")

    command: str
    config: Dict[str, Any]
    seeds: Dict[str, int]
    dataset_checksums: Dict[str, str] = Field(default_factory=dict)
    toolkit_version: str
    timings: Dict[str, float] = Field(default_factory=dict)
    started_at: str
    finished_at: Optional[str] = None
    status: str = "running"
    error: Optional[str] = None


class ValidationUtils:
    """Utility functions for validation"""

    @staticmethod
    def format_errors(exc) -> List[str]:
        """Field-level messages from a pydantic ValidationError"""
        messages = []
        for error in exc.errors():
            location = ".".join(str(part) for part in error["loc"]) or "config"
            messages.append(f"{location}: {error['msg']}")
        return messages
