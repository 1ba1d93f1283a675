from typing import Optional

from pydantic import BaseModel, Extra, Field, validator

from ..imaging.data import LinearModel

# Young-adult DXA reference for the proximal femur, g/cm²
T_SCORE_REF_MEAN = 0.875
T_SCORE_REF_SD = 0.100


class BMDConfig(BaseModel):
    # quantitative DRR units
    threshold_t: float = 1000.0
    ref_mean: float = T_SCORE_REF_MEAN
    ref_sd: float = Field(T_SCORE_REF_SD, gt=0.0)

    class Config:
        extra = Extra.forbid


class MaskedAverage(BaseModel):
    value: float
    n_pixels: int = Field(..., ge=0)
    # no pixel reached the threshold
    degenerate: bool

    class Config:
        extra = Extra.forbid


class BMDEstimate(BaseModel):
    pf_average: float
    # g/cm²
    predicted_dxa_bmd: float
    # mg/cm³
    predicted_qct_bmd: float
    t_score: float
    degenerate: bool = False

    class Config:
        extra = Extra.forbid


class BMDCalibration(BaseModel):
    """
    PF-DRR average to BMD lines fitted on the TRAIN split. Serialized as the calibration record.
    """

    threshold_t: float = 1000.0
    dxa: LinearModel
    qct: LinearModel
    ref_mean: float = T_SCORE_REF_MEAN
    ref_sd: float = T_SCORE_REF_SD
    config_hash: Optional[str] = None
    manifest_hash: Optional[str] = None

    class Config:
        extra = Extra.forbid

    @validator("ref_sd")
    def ref_sd_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError(f"ref_sd must be positive, got {value}")
        return value

    @property
    def dxa_model(self) -> LinearModel:
        return self.dxa

    @property
    def qct_model(self) -> LinearModel:
        return self.qct
