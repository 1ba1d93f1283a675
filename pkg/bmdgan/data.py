"""
Run configuration: the parsed form of one TOML config file.
"""
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel, Extra, validator

from .bmd.data import BMDConfig
from .errors import ConfigError
from .gan.data import DiscriminatorConfig, GeneratorConfig
from .losses.data import LossWeights
from .metrics.data import EvalConfig
from .phantom.data import DatasetConfig, PhantomSpec
from .training.data import STAGE_DEFAULTS, BaselineConfig, StageConfig, StageName


class PathsConfig(BaseModel):
    out_dir: Path
    # None: the dataset lives next to the run outputs
    data_dir: Optional[Path] = None

    class Config:
        extra = Extra.forbid

    @property
    def dataset_dir(self) -> Path:
        return self.data_dir if self.data_dir is not None else self.out_dir


class SeedsConfig(BaseModel):
    data: int = 0
    train: int = 0
    eval: int = 0

    class Config:
        extra = Extra.forbid


def _stage_section(stage: StageName, value: Any) -> Dict[str, Any]:
    if value is None:
        value = {}
    if isinstance(value, StageConfig):
        value = value.dict()
    if not isinstance(value, dict):
        raise ValueError(f"expected a table, got {type(value).__name__}")
    section = dict(STAGE_DEFAULTS[stage])
    section.update(value)
    declared = section.get("stage", stage.value)
    if isinstance(declared, StageName):
        declared = declared.value
    if declared != stage.value:
        raise ValueError(f"stage must be {stage.value}, got {declared}")
    section["stage"] = stage.value
    return section


class RunConfig(BaseModel):
    # Required by synth only
    phantom: Optional[PhantomSpec] = None
    dataset: DatasetConfig = DatasetConfig()
    stage1: StageConfig = StageConfig(stage=StageName.STAGE1, **STAGE_DEFAULTS[StageName.STAGE1])
    stage2: StageConfig = StageConfig(stage=StageName.STAGE2, **STAGE_DEFAULTS[StageName.STAGE2])
    loss: LossWeights = LossWeights()
    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    baseline: BaselineConfig = BaselineConfig()
    bmd: BMDConfig = BMDConfig()
    eval: EvalConfig = EvalConfig()
    paths: PathsConfig
    seeds: SeedsConfig = SeedsConfig()
    hierarchical: bool = True
    warm_start_discriminators: bool = False

    class Config:
        extra = Extra.forbid

    @validator("stage1", pre=True, always=True)
    def stage1_defaults(cls, value: Any) -> Dict[str, Any]:
        return _stage_section(StageName.STAGE1, value)

    @validator("stage2", pre=True, always=True)
    def stage2_defaults(cls, value: Any) -> Dict[str, Any]:
        return _stage_section(StageName.STAGE2, value)

    def require_phantom(self) -> PhantomSpec:
        if self.phantom is None:
            raise ConfigError("phantom", "section is required to synthesize a dataset")
        return self.phantom
