"""
Network configuration and checkpoint sidecar schemas
"""
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Extra, Field, root_validator

from ..losses.data import LossWeights


class GeneratorBackbone(Enum):
    RESNET_GLOBAL = "RESNET_GLOBAL"
    HR_LITE = "HR_LITE"


class OutputActivation(Enum):
    TANH = "TANH"


def normalized_channels(base_channels: int, n_downsamples: int) -> List[int]:
    return [base_channels * 2 ** k for k in range(n_downsamples + 1)]


class GeneratorConfig(BaseModel):
    backbone: GeneratorBackbone = GeneratorBackbone.RESNET_GLOBAL
    base_channels: int = Field(32, ge=8)
    n_downsamples: int = Field(2, ge=1)
    n_res_blocks: int = Field(4, ge=1)
    norm_groups: int = Field(8, ge=1)
    output_activation: OutputActivation = OutputActivation.TANH

    class Config:
        extra = Extra.forbid

    @root_validator(skip_on_failure=True)
    def groups_divide_channels(cls, values):
        groups = values["norm_groups"]
        for channels in normalized_channels(values["base_channels"], values["n_downsamples"]):
            if channels % groups != 0:
                raise ValueError(f"norm_groups={groups} does not divide {channels} channels")
        return values

    @property
    def size_multiple(self) -> int:
        return 2 ** self.n_downsamples


def discriminator_channels(base_channels: int, n_layers: int) -> List[int]:
    return [base_channels * min(2 ** k, 8) for k in range(n_layers)]


class DiscriminatorConfig(BaseModel):
    base_channels: int = Field(32, ge=8)
    # conv blocks per discriminator; all but the last downsample by 2
    n_layers: int = Field(3, ge=2)
    norm_groups: int = Field(8, ge=1)

    class Config:
        extra = Extra.forbid

    @root_validator(skip_on_failure=True)
    def groups_divide_channels(cls, values):
        groups = values["norm_groups"]
        # the first block is not normalized
        for channels in discriminator_channels(values["base_channels"], values["n_layers"])[1:]:
            if channels % groups != 0:
                raise ValueError(f"norm_groups={groups} does not divide {channels} channels")
        return values


class RegressorConfig(BaseModel):
    base_channels: int = Field(16, ge=4)
    n_downsamples: int = Field(4, ge=1)
    norm_groups: int = Field(4, ge=1)

    class Config:
        extra = Extra.forbid

    @root_validator(skip_on_failure=True)
    def groups_divide_channels(cls, values):
        groups = values["norm_groups"]
        for channels in normalized_channels(values["base_channels"], values["n_downsamples"]):
            if channels % groups != 0:
                raise ValueError(f"norm_groups={groups} does not divide {channels} channels")
        return values


class CheckpointSidecar(BaseModel):
    """
    JSON record written next to every generator checkpoint.
    """

    stage: int = Field(..., ge=1, le=2)
    epoch: int = Field(..., ge=0)
    generator_config: GeneratorConfig
    discriminator_config: DiscriminatorConfig
    loss_weights: LossWeights
    rng_seed: int
    manifest_hash: str
    config_hash: Optional[str] = None
    hierarchical: bool = True
    bmdgan_version: Optional[str] = None

    class Config:
        extra = Extra.forbid


class RegressionSidecar(BaseModel):
    epoch: int = Field(..., ge=0)
    regressor_config: RegressorConfig
    # the regressor predicts standardized BMD: (bmd - target_mean) / target_std
    target_mean: float
    target_std: float = Field(..., gt=0.0)
    rng_seed: int
    manifest_hash: str
    config_hash: Optional[str] = None
    bmdgan_version: Optional[str] = None

    class Config:
        extra = Extra.forbid
