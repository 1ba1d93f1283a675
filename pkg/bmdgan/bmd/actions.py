import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidArgument
from ..gan.actions import GeneratorCheckpoint, generator_forward
from ..gan.models import Generator
from ..imaging.actions import PathLike, fit_linear, from_normalized, to_normalized
from ..imaging.data import Image2D, ImageUnit, Normalization
from .data import (
    T_SCORE_REF_MEAN,
    T_SCORE_REF_SD,
    BMDCalibration,
    BMDEstimate,
    MaskedAverage,
)

logger = logging.getLogger(__name__)


class StageMismatch(InvalidArgument):
    """
    Raised when BMD is requested from a checkpoint that was not trained on proximal-region targets.
    """


def masked_average(drr: Image2D, t: float) -> MaskedAverage:
    """
    Mean of the pixels with value >= t. No qualifying pixel gives 0 with the degenerate flag.
    """
    if drr.unit == ImageUnit.NORMALIZED:
        raise InvalidArgument("masked_average needs a DRR in quantitative units, got NORMALIZED")
    values = drr.pixels.astype(np.float64)
    selected = values[values >= t]
    if selected.size == 0:
        return MaskedAverage(value=0.0, n_pixels=0, degenerate=True)
    return MaskedAverage(value=float(selected.mean()), n_pixels=int(selected.size), degenerate=False)


def t_score(bmd: float, ref_mean: float = T_SCORE_REF_MEAN, ref_sd: float = T_SCORE_REF_SD) -> float:
    if not ref_sd > 0:
        raise InvalidArgument(f"ref_sd must be positive, got {ref_sd}")
    return (bmd - ref_mean) / ref_sd


def fit_bmd_calibration(
    train_cases: Sequence[Tuple[float, float, float]],
    t: float = 1000.0,
    ref_mean: float = T_SCORE_REF_MEAN,
    ref_sd: float = T_SCORE_REF_SD,
    config_hash: Optional[str] = None,
    manifest_hash: Optional[str] = None,
) -> BMDCalibration:
    """
    train_cases holds (pf_average, true_dxa_bmd, true_qct_bmd) per training case. Fits
    average -> DXA and average -> QCT independently.
    """
    averages = [case[0] for case in train_cases]
    dxa_model = fit_linear(averages, [case[1] for case in train_cases])
    qct_model = fit_linear(averages, [case[2] for case in train_cases])
    logger.info(
        f"Calibrated on {len(averages)} cases: DXA = {dxa_model.slope:.6g} * avg + "
        f"{dxa_model.intercept:.6g} (SE {dxa_model.residual_se:.4g})"
    )
    return BMDCalibration(
        threshold_t=t,
        dxa=dxa_model,
        qct=qct_model,
        ref_mean=ref_mean,
        ref_sd=ref_sd,
        config_hash=config_hash,
        manifest_hash=manifest_hash,
    )


def estimate_from_drr(drr: Image2D, calibration: BMDCalibration) -> BMDEstimate:
    average = masked_average(drr, calibration.threshold_t)
    dxa = float(calibration.dxa.predict(average.value))
    qct = float(calibration.qct.predict(average.value))
    return BMDEstimate(
        pf_average=average.value,
        predicted_dxa_bmd=dxa,
        predicted_qct_bmd=qct,
        t_score=t_score(dxa, calibration.ref_mean, calibration.ref_sd),
        degenerate=average.degenerate,
    )


def predict_pf_drr(
    generator: Generator,
    xray: Image2D,
    xray_normalization: Normalization,
    target_normalization: Normalization,
) -> Image2D:
    """
    Raw x-ray (or an already NORMALIZED one) to a quantitative predicted DRR.
    """
    if xray.unit != ImageUnit.NORMALIZED:
        xray = to_normalized(xray, xray_normalization.scale, xray_normalization.offset)
    predicted = generator_forward(generator, xray)
    return from_normalized(
        predicted,
        target_normalization.scale,
        target_normalization.offset,
        unit=ImageUnit.DENSITY_LINE_INTEGRAL,
    )


def predict_bmd(
    checkpoint: GeneratorCheckpoint,
    xray: Image2D,
    calibration: BMDCalibration,
    xray_normalization: Normalization,
    target_normalization: Normalization,
) -> Tuple[BMDEstimate, Image2D]:
    """
    Normalizes the x-ray, decomposes it with a stage 2 generator, denormalizes the output and
    converts its thresholded average to BMD. Returns the estimate and the predicted PF-DRR.
    """
    if checkpoint.sidecar.stage != 2:
        raise StageMismatch(
            f"BMD prediction needs a stage 2 checkpoint, got stage {checkpoint.sidecar.stage}"
        )
    drr = predict_pf_drr(checkpoint.generator, xray, xray_normalization, target_normalization)
    estimate = estimate_from_drr(drr, calibration)
    if estimate.degenerate:
        logger.warning(
            f"Predicted PF-DRR has no pixel above t={calibration.threshold_t}; estimate is degenerate"
        )
    return estimate, drr


def write_calibration(calibration: BMDCalibration, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as ofp:
        ofp.write(calibration.json(sort_keys=True, indent=2))
        ofp.write("\n")


def read_calibration(path: PathLike) -> BMDCalibration:
    return BMDCalibration.parse_file(path, encoding="utf-8")

