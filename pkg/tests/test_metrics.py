import json
import math

import numpy as np
import pytest

from bmdgan.bmd.data import BMDEstimate
from bmdgan.errors import InvalidArgument, UndefinedCorrelation
from bmdgan.imaging.data import Image2D, ImageUnit
from bmdgan.metrics.actions import (
    PSNR_INFINITY,
    agreement_or_nan,
    cov_repeated,
    dice_coefficient,
    evaluate_run,
    icc,
    mae,
    multi_threshold_dice,
    pcc,
    psnr,
    record_json,
    report_from_records,
    see,
)
from bmdgan.metrics.data import CasePrediction, CaseTruth, EvalConfig, EvaluationReport
from bmdgan.metrics.plots import write_plots


def anova_icc(x, y) -> float:
    """
    ICC(2,1) written out from the two-way ANOVA table.
    """
    n = len(x)
    k = 2
    rows = [[x[i], y[i]] for i in range(n)]
    grand = sum(sum(row) for row in rows) / (n * k)
    row_means = [sum(row) / k for row in rows]
    col_means = [sum(rows[i][j] for i in range(n)) / n for j in range(k)]
    ss_rows = k * sum((m - grand) ** 2 for m in row_means)
    ss_cols = n * sum((m - grand) ** 2 for m in col_means)
    ss_total = sum((rows[i][j] - grand) ** 2 for i in range(n) for j in range(k))
    ss_error = ss_total - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_error / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


def test_psnr_hand_evaluated():
    truth = np.zeros((2, 2))
    pred = np.full((2, 2), 0.1)
    assert psnr(pred, truth, 1.0) == pytest.approx(20.0)
    assert psnr(truth, truth, 1.0) == PSNR_INFINITY
    with pytest.raises(InvalidArgument):
        psnr(pred, truth, 0.0)
    with pytest.raises(InvalidArgument):
        psnr(np.zeros((2, 3)), truth, 1.0)


def test_psnr_accepts_images():
    truth = Image2D(pixels=np.full((4, 4), 100.0), unit=ImageUnit.DENSITY_LINE_INTEGRAL)
    pred = Image2D(pixels=np.full((4, 4), 90.0), unit=ImageUnit.DENSITY_LINE_INTEGRAL)
    assert psnr(pred, truth, 1000.0) == pytest.approx(40.0)


def test_dice_coefficients():
    a = np.array([[True, True], [False, False]])
    b = np.array([[True, False], [True, False]])
    assert dice_coefficient(a, b) == pytest.approx(0.5)
    assert dice_coefficient(a, a) == 1.0
    empty = np.zeros((2, 2), dtype=bool)
    assert dice_coefficient(empty, empty) == 1.0
    assert dice_coefficient(a, empty) == 0.0


def test_multi_threshold_dice():
    truth = np.array([[0.0, 10.0], [20.0, 30.0]])
    pred = np.array([[0.0, 10.0], [10.0, 30.0]])
    mean, per_threshold = multi_threshold_dice(pred, truth, [5.0, 15.0, 25.0])
    # masks at 15: pred {30}, truth {20, 30}
    assert per_threshold == pytest.approx([1.0, 2.0 / 3.0, 1.0])
    assert mean == pytest.approx((2.0 + 2.0 / 3.0) / 3.0)
    with pytest.raises(InvalidArgument):
        multi_threshold_dice(pred, truth, [15.0, 5.0])
    with pytest.raises(InvalidArgument):
        multi_threshold_dice(pred, truth, [])


def test_pcc_values():
    x = [1.0, 2.0, 3.0, 4.0]
    assert pcc(x, [2.0 * v + 1.0 for v in x]) == pytest.approx(1.0)
    assert pcc(x, [-v for v in x]) == pytest.approx(-1.0)
    assert pcc([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]) == pytest.approx(0.5)
    with pytest.raises(UndefinedCorrelation):
        pcc(x, [5.0] * 4)


def test_icc_matches_anova_table():
    rng = np.random.default_rng(11)
    for _ in range(20):
        truth = rng.normal(1.0, 0.2, size=12)
        pred = truth + rng.normal(0.05, 0.05, size=12)
        assert icc(pred, truth) == pytest.approx(anova_icc(list(pred), list(truth)), rel=1e-9)


def test_icc_penalizes_shift_while_pcc_does_not():
    truth = [0.7, 0.8, 0.9, 1.0, 1.1]
    shifted = [v + 0.1 for v in truth]
    assert pcc(shifted, truth) == pytest.approx(1.0)
    assert icc(truth, truth) == pytest.approx(1.0)
    assert icc(shifted, truth) < 1.0
    with pytest.raises(InvalidArgument):
        icc([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(UndefinedCorrelation):
        icc([1.0] * 3, [1.0] * 3)


def test_mae_and_see():
    truth = [1.0, 2.0, 3.0, 4.0]
    assert mae([1.5, 2.0, 2.0, 4.0], truth) == pytest.approx(0.375)
    # truth is an exact line of pred
    assert see([0.0, 1.0, 2.0, 3.0], [2.0 * v + 1.0 for v in [0.0, 1.0, 2.0, 3.0]]) == pytest.approx(
        0.0, abs=1e-12
    )
    pred = [0.0, 1.0, 2.0, 3.0]
    noisy = [0.0, 2.0, 2.0, 4.0]
    # fitted line 1.2 x + 0.2, residuals -0.2, 0.6, -0.6, 0.2
    assert see(pred, noisy) == pytest.approx(math.sqrt(0.8 / 2.0))


def test_cov_repeated():
    assert cov_repeated([[90.0, 110.0]]) == pytest.approx(14.142135623730951)
    assert cov_repeated([[90.0, 110.0], [100.0, 100.0]]) == pytest.approx(7.0710678118654755)
    with pytest.raises(InvalidArgument):
        cov_repeated([[1.0]])
    with pytest.raises(InvalidArgument):
        cov_repeated([])


def test_agreement_or_nan():
    assert math.isnan(agreement_or_nan(pcc, [1.0, 2.0], [3.0, 3.0], "PCC"))
    assert agreement_or_nan(pcc, [1.0, 2.0], [3.0, 4.0], "PCC") == pytest.approx(1.0)


def synthetic_run(rng, n_cases: int = 6, with_repeats: bool = True):
    predictions = {}
    ground_truth = {}
    for index in range(n_cases):
        case_id = f"case{index:04d}"
        true_drr = rng.uniform(0.0, 2000.0, size=(16, 8))
        pred_drr = np.clip(true_drr + rng.normal(0.0, 50.0, size=true_drr.shape), 0.0, None)
        true_dxa = 0.6 + 0.05 * index
        pred_dxa = true_dxa + rng.normal(0.0, 0.03)
        estimate = BMDEstimate(
            pf_average=float(pred_drr.mean()),
            predicted_dxa_bmd=pred_dxa,
            predicted_qct_bmd=200.0 * pred_dxa,
            t_score=(pred_dxa - 0.875) / 0.1,
        )
        predictions[case_id] = CasePrediction(
            pred_drr=Image2D(pixels=pred_drr, unit=ImageUnit.DENSITY_LINE_INTEGRAL),
            estimate=estimate,
            repeat_dxa=[pred_dxa + 0.01] if with_repeats else [],
        )
        ground_truth[case_id] = CaseTruth(
            true_drr=Image2D(pixels=true_drr, unit=ImageUnit.DENSITY_LINE_INTEGRAL),
            true_dxa=true_dxa,
            true_qct=200.0 * true_dxa + rng.normal(0.0, 2.0),
            true_pf_average=float(true_drr.mean()),
        )
    return predictions, ground_truth


def test_evaluate_run_aggregates(rng):
    predictions, ground_truth = synthetic_run(rng)
    baseline = {case_id: truth.true_dxa + 0.05 for case_id, truth in ground_truth.items()}
    report = evaluate_run(predictions, ground_truth, baseline=baseline, config_hash="abc")

    ids = sorted(ground_truth)
    assert report.n_cases == 6
    assert [record.id for record in report.per_case_records] == ids
    pred_dxa = [predictions[i].estimate.predicted_dxa_bmd for i in ids]
    true_dxa = [ground_truth[i].true_dxa for i in ids]
    assert report.pcc == pytest.approx(pcc(pred_dxa, true_dxa))
    assert report.icc == pytest.approx(icc(pred_dxa, true_dxa))
    assert report.mae == pytest.approx(mae(pred_dxa, true_dxa))
    assert report.psnr_mean == pytest.approx(np.mean(report.psnr_per_case))

    data_range = max(float(ground_truth[i].true_drr.pixels.max()) for i in ids)
    assert report.dice_thresholds == pytest.approx([f * data_range for f in (0.1, 0.3, 0.5, 0.7, 0.9)])
    first = ids[0]
    assert report.psnr_per_case[0] == pytest.approx(
        psnr(predictions[first].pred_drr, ground_truth[first].true_drr, data_range)
    )
    assert report.t_score_abs_error_mean == pytest.approx(
        np.mean([abs((p - t) / 0.1) for p, t in zip(pred_dxa, true_dxa)])
    )
    assert report.cov_percent is not None and report.cov_percent > 0.0
    assert report.baseline is not None
    assert report.baseline.mae == pytest.approx(0.05)
    assert report.baseline.pcc == pytest.approx(1.0)
    assert report.config_hash == "abc"


def test_report_recomputes_from_records(rng):
    predictions, ground_truth = synthetic_run(rng)
    report = evaluate_run(predictions, ground_truth)
    recomputed = report_from_records(list(reversed(report.per_case_records)), report.dice_thresholds)
    assert recomputed == report

    restored = EvaluationReport.parse_raw(report.json())
    assert restored.icc == pytest.approx(report.icc)


def test_evaluate_run_ignores_case_order(rng):
    predictions, ground_truth = synthetic_run(rng)
    baseline = {case_id: truth.true_dxa + 0.03 for case_id, truth in ground_truth.items()}
    report = evaluate_run(predictions, ground_truth, baseline=baseline)

    order = list(ground_truth)
    rng.shuffle(order)
    shuffled = evaluate_run(
        {case_id: predictions[case_id] for case_id in reversed(order)},
        {case_id: ground_truth[case_id] for case_id in order},
        baseline={case_id: baseline[case_id] for case_id in order},
    )
    assert shuffled.json() == report.json()


def test_evaluate_run_checks_case_ids(rng):
    predictions, ground_truth = synthetic_run(rng, n_cases=4)
    del predictions["case0001"]
    with pytest.raises(InvalidArgument):
        evaluate_run(predictions, ground_truth)


def test_constant_predictions_report_nan(rng):
    predictions, ground_truth = synthetic_run(rng, n_cases=4, with_repeats=False)
    for prediction in predictions.values():
        prediction.estimate = prediction.estimate.copy(
            update={"predicted_dxa_bmd": 0.5, "degenerate": True}
        )
    report = evaluate_run(predictions, ground_truth)
    assert math.isnan(report.pcc)
    assert math.isnan(report.see)
    assert math.isfinite(report.icc)
    assert report.n_degenerate == 4
    assert report.cov_percent is None
    assert report.mae > 0.0


def reject_constant(token: str):
    raise ValueError(f"non-standard JSON token {token}")


def test_report_json_is_strict_for_non_finite_values(rng):
    predictions, ground_truth = synthetic_run(rng, n_cases=4, with_repeats=False)
    predictions["case0000"].pred_drr = ground_truth["case0000"].true_drr
    for prediction in predictions.values():
        prediction.estimate = prediction.estimate.copy(update={"predicted_dxa_bmd": 0.5})
    report = evaluate_run(predictions, ground_truth)
    assert report.psnr_per_case[0] == PSNR_INFINITY
    assert math.isnan(report.pcc)

    text = record_json(report, sort_keys=True)
    payload = json.loads(text, parse_constant=reject_constant)
    assert payload["psnr_per_case"][0] == "Infinity"
    assert payload["pcc"] == "NaN"

    restored = EvaluationReport.parse_raw(text)
    assert restored.psnr_per_case[0] == PSNR_INFINITY
    assert math.isnan(restored.pcc)
    assert restored.psnr_per_case[1:] == pytest.approx(report.psnr_per_case[1:])


def test_eval_config_validation():
    assert EvalConfig().dice_threshold_fractions == [0.1, 0.3, 0.5, 0.7, 0.9]
    with pytest.raises(ValueError):
        EvalConfig(dice_threshold_fractions=[0.5, 0.3])
    with pytest.raises(ValueError):
        EvalConfig(dice_threshold_fractions=[])


def test_write_plots(rng, tmp_path):
    predictions, ground_truth = synthetic_run(rng)
    baseline = {case_id: truth.true_dxa + 0.02 for case_id, truth in ground_truth.items()}
    report = evaluate_run(predictions, ground_truth, baseline=baseline)
    paths = write_plots(report, tmp_path / "plots")
    assert len(paths) == 3
    for path in paths:
        assert path.is_file()
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
