"""
Evaluation inputs and report schema
"""
from dataclasses import dataclass, field
from typing import List, Optional

from pydantic import BaseModel, Extra, Field, validator

from ..bmd.data import BMDEstimate
from ..imaging.data import Image2D


class EvalConfig(BaseModel):
    # Dice thresholds as fractions of the ground-truth dataset maximum
    dice_threshold_fractions: List[float] = Field(
        default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9]
    )
    plots: bool = True

    class Config:
        extra = Extra.forbid

    @validator("dice_threshold_fractions")
    def fractions_ascending(cls, fractions: List[float]) -> List[float]:
        if not fractions:
            raise ValueError("dice_threshold_fractions must not be empty")
        if any(b <= a for a, b in zip(fractions, fractions[1:])):
            raise ValueError("dice_threshold_fractions must be strictly ascending")
        return fractions


@dataclass
class CasePrediction:
    pred_drr: Image2D
    estimate: BMDEstimate
    # predicted DXA-BMD of repeated acquisitions of the same case
    repeat_dxa: List[float] = field(default_factory=list)


@dataclass
class CaseTruth:
    true_drr: Image2D
    true_dxa: float
    true_qct: float
    true_pf_average: float


class BaselineMetrics(BaseModel):
    icc: float
    pcc: float
    mae: float
    see: float

    class Config:
        extra = Extra.forbid


class CaseRecord(BaseModel):
    id: str
    psnr: float
    dice_mean: float
    dice_per_threshold: List[float]
    pf_average_pred: float
    pf_average_true: float
    pred_dxa: float
    true_dxa: float
    pred_qct: float
    true_qct: float
    t_score_pred: float
    t_score_true: float
    degenerate: bool
    baseline_dxa: Optional[float] = None
    repeat_dxa: List[float] = Field(default_factory=list)

    class Config:
        extra = Extra.forbid


class EvaluationReport(BaseModel):
    n_cases: int
    psnr_mean: float
    psnr_per_case: List[float]
    dice_mean: float
    dice_thresholds: List[float]
    dice_per_threshold: List[float]
    icc: float
    pcc: float
    # g/cm²
    mae: float
    see: float
    pcc_wrt_qct: float
    pf_average_icc: float
    pf_average_pcc: float
    t_score_abs_error_mean: float
    t_score_abs_error_sd: float
    cov_percent: Optional[float] = None
    cov_percent_sd: Optional[float] = None
    n_degenerate: int = 0
    baseline: Optional[BaselineMetrics] = None
    per_case_records: List[CaseRecord]
    config_hash: Optional[str] = None
    manifest_hash: Optional[str] = None

    class Config:
        extra = Extra.forbid


class PredictionsDump(BaseModel):
    """
    Per-case records written next to the report; enough to recompute every aggregate.
    """

    dice_thresholds: List[float]
    records: List[CaseRecord]
    config_hash: Optional[str] = None
    manifest_hash: Optional[str] = None

    class Config:
        extra = Extra.forbid
