"""
Training configuration and log record schemas
"""
from dataclasses import dataclass
from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, Extra, Field, root_validator

from ..gan.data import RegressorConfig
from ..imaging.data import HierarchyStage


class StageName(Enum):
    STAGE1 = "STAGE1"
    STAGE2 = "STAGE2"


STAGE_TARGETS = {
    StageName.STAGE1: HierarchyStage.STAGE1_BONES,
    StageName.STAGE2: HierarchyStage.STAGE2_PROXIMAL,
}
STAGE_NUMBERS = {StageName.STAGE1: 1, StageName.STAGE2: 2}
# RNG stream id of the regression baseline; never a stage number
BASELINE_STREAM = 0


class LRPolicy(Enum):
    LINEAR_DECAY = "LINEAR_DECAY"
    SGDR = "SGDR"


class LRPolicyParams(BaseModel):
    # LINEAR_DECAY; None keeps the initial rate for half of the epochs
    keep_epochs: Optional[int] = Field(None, ge=0)
    # SGDR
    eta_min: float = Field(0.0, ge=0.0)
    T0: int = Field(10, ge=1)
    T_mult: int = Field(2, ge=1)

    class Config:
        extra = Extra.forbid


class AugmentParams(BaseModel):
    """
    Symmetric ranges: every parameter is drawn uniformly from [-value, value].
    """

    rotation_deg: float = Field(25.0, ge=0.0)
    shear_deg: float = Field(8.0, ge=0.0, lt=90.0)
    translate_frac: float = Field(0.3, ge=0.0)
    scale_frac: float = Field(0.3, ge=0.0, lt=1.0)
    hflip: bool = True
    vflip: bool = True

    class Config:
        extra = Extra.forbid

    @classmethod
    def disabled(cls) -> "AugmentParams":
        return cls(
            rotation_deg=0.0,
            shear_deg=0.0,
            translate_frac=0.0,
            scale_frac=0.0,
            hflip=False,
            vflip=False,
        )


@dataclass(frozen=True)
class AffineDraw:
    rotation_deg: float = 0.0
    shear_deg: float = 0.0
    # fractions of the image width / height
    translate_x: float = 0.0
    translate_y: float = 0.0
    scale: float = 1.0
    hflip: bool = False
    vflip: bool = False


class StageConfig(BaseModel):
    stage: StageName
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(4, ge=1)
    lr_initial: float = Field(2e-4, gt=0.0)
    lr_policy: LRPolicy = LRPolicy.LINEAR_DECAY
    lr_policy_params: LRPolicyParams = LRPolicyParams()
    weight_decay: float = Field(1e-4, ge=0.0)
    augment: AugmentParams = AugmentParams()
    # None: use seeds.train of the run config
    rng_seed: Optional[int] = None
    # TRAIN cases used for per-epoch validation PSNR
    tracking_cases: int = Field(2, ge=1)
    # write a progress image every this many epochs; 0 disables
    snapshot_every: int = Field(1, ge=0)

    class Config:
        extra = Extra.forbid

    @root_validator(skip_on_failure=True)
    def keep_epochs_in_range(cls, values):
        keep = values["lr_policy_params"].keep_epochs
        if keep is not None and keep > values["epochs"]:
            raise ValueError(
                f"lr_policy_params.keep_epochs={keep} exceeds epochs={values['epochs']}"
            )
        return values

    @property
    def target_stage(self) -> HierarchyStage:
        return STAGE_TARGETS[self.stage]

    @property
    def number(self) -> int:
        return STAGE_NUMBERS[self.stage]


STAGE_DEFAULTS = {
    StageName.STAGE1: {"lr_policy": LRPolicy.LINEAR_DECAY.value, "weight_decay": 1e-4},
    StageName.STAGE2: {"lr_policy": LRPolicy.SGDR.value, "weight_decay": 1e-8},
}


def default_stage_config(stage: StageName) -> StageConfig:
    return StageConfig(stage=stage, **STAGE_DEFAULTS[stage])


class BaselineConfig(BaseModel):
    """
    Direct x-ray to BMD regression baseline.
    """

    epochs: int = Field(20, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    augment: AugmentParams = AugmentParams()
    regressor: RegressorConfig = RegressorConfig()
    rng_seed: Optional[int] = None

    class Config:
        extra = Extra.forbid


class StepRecord(BaseModel):
    record: Literal["step"] = "step"
    stage: int
    epoch: int
    step: int
    gan_g: float
    gan_d: float
    fm: float
    l1: float
    gc: float
    total_g: float
    lr: float

    class Config:
        extra = Extra.forbid


class EpochRecord(BaseModel):
    record: Literal["epoch"] = "epoch"
    stage: int
    epoch: int
    lr: float
    val_psnr: float

    class Config:
        extra = Extra.forbid


class BaselineEpochRecord(BaseModel):
    record: Literal["baseline_epoch"] = "baseline_epoch"
    epoch: int
    lr: float
    mse: float

    class Config:
        extra = Extra.forbid
