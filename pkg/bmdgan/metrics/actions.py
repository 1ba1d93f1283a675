import json
import logging
import math
from typing import Any, Callable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from ..bmd.actions import t_score
from ..bmd.data import T_SCORE_REF_MEAN, T_SCORE_REF_SD
from ..errors import InvalidArgument, SingularFitError, UndefinedCorrelation
from ..imaging.actions import fit_linear
from ..imaging.data import Image2D
from .data import (
    BaselineMetrics,
    CasePrediction,
    CaseRecord,
    CaseTruth,
    EvalConfig,
    EvaluationReport,
)

logger = logging.getLogger(__name__)

# Recorded PSNR of a pair with zero error
PSNR_INFINITY = math.inf
# JSON strings for non-finite floats; pydantic float fields parse them back
NON_FINITE_TOKENS = {"inf": "Infinity", "-inf": "-Infinity", "nan": "NaN"}

ImageLike = Union[Image2D, np.ndarray]


def _pixels(image: ImageLike) -> np.ndarray:
    if isinstance(image, Image2D):
        return image.pixels.astype(np.float64)
    return np.asarray(image, dtype=np.float64)


def _paired(x: Sequence[float], y: Sequence[float], minimum: int, what: str):
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise InvalidArgument(f"{what}: inputs must be 1-dimensional and of equal length")
    if xs.size < minimum:
        raise InvalidArgument(f"{what}: needs at least {minimum} values, got {xs.size}")
    return xs, ys


def psnr(pred: ImageLike, truth: ImageLike, data_range: float) -> float:
    """
    10 log10(data_range^2 / MSE) in dB; PSNR_INFINITY when the images are identical.
    """
    if not data_range > 0:
        raise InvalidArgument(f"data_range must be positive, got {data_range}")
    a = _pixels(pred)
    b = _pixels(truth)
    if a.shape != b.shape:
        raise InvalidArgument(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INFINITY
    return 10.0 * math.log10(data_range ** 2 / mse)


def dice_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    """
    2|A n B| / (|A| + |B|) of two boolean masks; two empty masks agree perfectly.
    """
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def multi_threshold_dice(
    pred: ImageLike, truth: ImageLike, thresholds: Sequence[float]
) -> Tuple[float, List[float]]:
    if len(thresholds) == 0:
        raise InvalidArgument("multi_threshold_dice needs at least one threshold")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise InvalidArgument(f"Thresholds must be ascending, got {list(thresholds)}")
    a = _pixels(pred)
    b = _pixels(truth)
    if a.shape != b.shape:
        raise InvalidArgument(f"multi_threshold_dice: shapes {a.shape} and {b.shape} differ")
    per_threshold = [dice_coefficient(a >= tau, b >= tau) for tau in thresholds]
    return float(np.mean(per_threshold)), per_threshold


def pcc(x: Sequence[float], y: Sequence[float]) -> float:
    xs, ys = _paired(x, y, 2, "pcc")
    x_zm = xs - xs.mean()
    y_zm = ys - ys.mean()
    sxx = float(np.sum(x_zm ** 2))
    syy = float(np.sum(y_zm ** 2))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("Pearson correlation is undefined for constant input")
    r = float(np.sum(x_zm * y_zm)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def icc(x: Sequence[float], y: Sequence[float]) -> float:
    """
    ICC(2,1): two-way random effects, absolute agreement, single measurement, with x and y as the
    two raters.
    """
    xs, ys = _paired(x, y, 3, "icc")
    data = np.column_stack([xs, ys])
    n, k = data.shape
    grand_mean = data.mean()

    ss_total = float(np.sum((data - grand_mean) ** 2))
    ss_rows = k * float(np.sum((data.mean(axis=1) - grand_mean) ** 2))
    ss_cols = n * float(np.sum((data.mean(axis=0) - grand_mean) ** 2))
    ss_error = ss_total - ss_rows - ss_cols

    ms_rows = ss_rows / (n - 1)
    ms_cols = ss_cols / (k - 1)
    ms_error = ss_error / ((n - 1) * (k - 1))

    denominator = ms_rows + (k - 1) * ms_error + k * (ms_cols - ms_error) / n
    if denominator == 0.0:
        raise UndefinedCorrelation("ICC is undefined when all measurements are identical")
    return (ms_rows - ms_error) / denominator


def mae(x: Sequence[float], y: Sequence[float]) -> float:
    xs, ys = _paired(x, y, 1, "mae")
    return float(np.mean(np.abs(xs - ys)))


def see(pred: Sequence[float], truth: Sequence[float]) -> float:
    """
    Residual standard error of the least-squares line of truth on prediction.
    """
    xs, ys = _paired(pred, truth, 3, "see")
    return fit_linear(xs, ys).residual_se


def cov_per_group(groups: Sequence[Sequence[float]]) -> List[float]:
    covs = []
    for index, group in enumerate(groups):
        values = np.asarray(group, dtype=np.float64)
        if values.size < 2:
            raise InvalidArgument(f"Group {index} needs at least 2 measurements, got {values.size}")
        mean = float(values.mean())
        if not mean > 0:
            raise InvalidArgument(f"Group {index} has non-positive mean {mean}")
        covs.append(float(values.std(ddof=1)) / mean * 100.0)
    return covs


def cov_repeated(groups: Sequence[Sequence[float]]) -> float:
    """
    Mean over groups of sample SD / mean, in percent.
    """
    if len(groups) == 0:
        raise InvalidArgument("cov_repeated needs at least one group")
    return float(np.mean(cov_per_group(groups)))


def agreement_or_nan(
    statistic: Callable[[Sequence[float], Sequence[float]], float],
    x: Sequence[float],
    y: Sequence[float],
    what: str,
) -> float:
    """
    Report-level wrapper: an undefined statistic is recorded as NaN instead of aborting the run.
    """
    try:
        return statistic(x, y)
    except (UndefinedCorrelation, SingularFitError, InvalidArgument) as e:
        logger.warning(f"{what} is undefined for these cases, reporting NaN: {e}")
        return math.nan


def baseline_metrics(pred: Sequence[float], truth: Sequence[float]) -> BaselineMetrics:
    return BaselineMetrics(
        icc=agreement_or_nan(icc, pred, truth, "Baseline ICC"),
        pcc=agreement_or_nan(pcc, pred, truth, "Baseline PCC"),
        mae=mae(pred, truth),
        see=agreement_or_nan(see, pred, truth, "Baseline SEE"),
    )


def evaluate_run(
    predictions: Mapping[str, CasePrediction],
    ground_truth: Mapping[str, CaseTruth],
    config: Optional[EvalConfig] = None,
    baseline: Optional[Mapping[str, float]] = None,
    ref_mean: float = T_SCORE_REF_MEAN,
    ref_sd: float = T_SCORE_REF_SD,
    config_hash: Optional[str] = None,
    manifest_hash: Optional[str] = None,
) -> EvaluationReport:
    """
    Computes every decomposition and BMD agreement metric over the cases, in id order.

    PSNR uses the maximum over all ground-truth DRRs as data range; Dice thresholds are fractions
    of the same maximum; mean Dice averages each case over thresholds, then over cases.
    """
    if config is None:
        config = EvalConfig()
    missing_predictions = sorted(set(ground_truth) - set(predictions))
    missing_truth = sorted(set(predictions) - set(ground_truth))
    if missing_predictions or missing_truth:
        raise InvalidArgument(
            f"Case ids do not match: missing predictions {missing_predictions}, "
            f"missing ground truth {missing_truth}"
        )
    if baseline is not None and set(baseline) != set(ground_truth):
        raise InvalidArgument(
            f"Baseline predictions do not cover the cases: "
            f"missing {sorted(set(ground_truth) - set(baseline))}"
        )

    ids = sorted(ground_truth)
    data_range = max(float(ground_truth[case_id].true_drr.pixels.max()) for case_id in ids)
    if not data_range > 0:
        raise InvalidArgument("Ground-truth DRRs are all zero")
    thresholds = [fraction * data_range for fraction in config.dice_threshold_fractions]

    records: List[CaseRecord] = []
    for case_id in ids:
        prediction = predictions[case_id]
        truth = ground_truth[case_id]
        dice_mean, dice_values = multi_threshold_dice(prediction.pred_drr, truth.true_drr, thresholds)
        estimate = prediction.estimate
        records.append(
            CaseRecord(
                id=case_id,
                psnr=psnr(prediction.pred_drr, truth.true_drr, data_range),
                dice_mean=dice_mean,
                dice_per_threshold=dice_values,
                pf_average_pred=estimate.pf_average,
                pf_average_true=truth.true_pf_average,
                pred_dxa=estimate.predicted_dxa_bmd,
                true_dxa=truth.true_dxa,
                pred_qct=estimate.predicted_qct_bmd,
                true_qct=truth.true_qct,
                t_score_pred=estimate.t_score,
                t_score_true=t_score(truth.true_dxa, ref_mean, ref_sd),
                degenerate=estimate.degenerate,
                baseline_dxa=None if baseline is None else float(baseline[case_id]),
                repeat_dxa=list(prediction.repeat_dxa),
            )
        )
    return report_from_records(
        records,
        thresholds,
        config_hash=config_hash,
        manifest_hash=manifest_hash,
    )


def report_from_records(
    records: Sequence[CaseRecord],
    dice_thresholds: Sequence[float],
    config_hash: Optional[str] = None,
    manifest_hash: Optional[str] = None,
) -> EvaluationReport:
    """
    Aggregates per-case records. Used by evaluate_run and to recompute a report from dumped
    predictions.
    """
    records = sorted(records, key=lambda record: record.id)
    pred_dxa = [record.pred_dxa for record in records]
    true_dxa = [record.true_dxa for record in records]
    pred_qct = [record.pred_qct for record in records]
    true_qct = [record.true_qct for record in records]
    pf_pred = [record.pf_average_pred for record in records]
    pf_true = [record.pf_average_true for record in records]
    t_errors = np.abs(
        np.array([record.t_score_pred - record.t_score_true for record in records])
    )

    cov_percent = None
    cov_percent_sd = None
    groups = [[record.pred_dxa] + record.repeat_dxa for record in records if record.repeat_dxa]
    if groups:
        try:
            covs = cov_per_group(groups)
        except InvalidArgument as e:
            logger.warning(f"Skipping reproducibility CoV: {e}")
        else:
            cov_percent = float(np.mean(covs))
            cov_percent_sd = float(np.std(covs, ddof=1)) if len(covs) > 1 else 0.0

    baseline = None
    if records and all(record.baseline_dxa is not None for record in records):
        baseline = baseline_metrics(
            [float(record.baseline_dxa) for record in records], true_dxa  # type: ignore
        )

    n_degenerate = sum(1 for record in records if record.degenerate)
    if n_degenerate:
        logger.warning(f"{n_degenerate} of {len(records)} predictions are degenerate")

    return EvaluationReport(
        n_cases=len(records),
        psnr_mean=float(np.mean([record.psnr for record in records])),
        psnr_per_case=[record.psnr for record in records],
        dice_mean=float(np.mean([record.dice_mean for record in records])),
        dice_thresholds=list(dice_thresholds),
        dice_per_threshold=[
            float(v) for v in np.mean([record.dice_per_threshold for record in records], axis=0)
        ],
        icc=agreement_or_nan(icc, pred_dxa, true_dxa, "ICC"),
        pcc=agreement_or_nan(pcc, pred_dxa, true_dxa, "PCC"),
        mae=mae(pred_dxa, true_dxa),
        see=agreement_or_nan(see, pred_dxa, true_dxa, "SEE"),
        pcc_wrt_qct=agreement_or_nan(pcc, pred_qct, true_qct, "PCC w.r.t. QCT"),
        pf_average_icc=agreement_or_nan(icc, pf_pred, pf_true, "PF-DRR average ICC"),
        pf_average_pcc=agreement_or_nan(pcc, pf_pred, pf_true, "PF-DRR average PCC"),
        t_score_abs_error_mean=float(t_errors.mean()),
        t_score_abs_error_sd=float(t_errors.std(ddof=1)) if len(records) > 1 else 0.0,
        cov_percent=cov_percent,
        cov_percent_sd=cov_percent_sd,
        n_degenerate=n_degenerate,
        baseline=baseline,
        per_case_records=list(records),
        config_hash=config_hash,
        manifest_hash=manifest_hash,
    )


def _encode_non_finite(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return NON_FINITE_TOKENS[repr(value)]
    if isinstance(value, dict):
        return {key: _encode_non_finite(item) for key, item in value.items()}
    if isinstance(value, list):
        return [_encode_non_finite(item) for item in value]
    return value


def record_json(record: BaseModel, sort_keys: bool = False, indent: Optional[int] = 2) -> str:
    """
    Strict JSON of a report, predictions or log record. Infinite PSNR and undefined agreement
    metrics are written as the strings of NON_FINITE_TOKENS.
    """
    payload = _encode_non_finite(json.loads(record.json()))
    return json.dumps(payload, indent=indent, sort_keys=sort_keys, allow_nan=False)
