import dataclasses
import math

import numpy as np
import pytest
import torch

from bmdgan.bmd.actions import (
    StageMismatch,
    estimate_from_drr,
    fit_bmd_calibration,
    masked_average,
    predict_bmd,
    read_calibration,
    t_score,
    write_calibration,
)
from bmdgan.bmd.data import BMDCalibration
from bmdgan.errors import InvalidArgument, SingularFitError
from bmdgan.gan.actions import GeneratorCheckpoint, build_generator
from bmdgan.gan.data import CheckpointSidecar
from bmdgan.imaging.data import Image2D, ImageUnit, LinearModel, Normalization, Split
from bmdgan.imaging.store import CaseStore
from bmdgan.losses.data import LossWeights
from bmdgan.phantom.actions import generate_dataset
from bmdgan.phantom.data import DatasetConfig
from bmdgan.training.actions import TrainingContext, train_stage
from bmdgan.training.data import AugmentParams, StageName, default_stage_config


def density_image(values) -> Image2D:
    return Image2D(pixels=np.asarray(values, dtype=np.float64), unit=ImageUnit.DENSITY_LINE_INTEGRAL)


def make_calibration(t: float = 1000.0) -> BMDCalibration:
    return BMDCalibration(
        threshold_t=t,
        dxa=LinearModel(slope=0.001, intercept=-0.2, residual_se=0.0, n=10),
        qct=LinearModel(slope=0.5, intercept=10.0, residual_se=0.0, n=10),
    )


def test_masked_average_hand_evaluated():
    drr = density_image([[900.0, 1000.0], [1100.0, 500.0]])
    average = masked_average(drr, 1000.0)
    assert average.value == pytest.approx(1050.0)
    assert average.n_pixels == 2
    assert not average.degenerate


def test_masked_average_degenerate_and_unbounded_threshold():
    drr = density_image([[1.0, 2.0], [3.0, 4.0]])
    empty = masked_average(drr, 10.0)
    assert empty.value == 0.0
    assert empty.n_pixels == 0
    assert empty.degenerate

    everything = masked_average(drr, -math.inf)
    assert everything.value == pytest.approx(2.5)
    assert everything.n_pixels == 4


def test_masked_average_rejects_normalized_input():
    with pytest.raises(InvalidArgument):
        masked_average(Image2D(pixels=np.zeros((2, 2)), unit=ImageUnit.NORMALIZED), 0.0)


def test_t_score_reference_values():
    assert t_score(0.875) == pytest.approx(0.0)
    assert t_score(0.775) == pytest.approx(-1.0)
    assert t_score(1.0, ref_mean=0.9, ref_sd=0.05) == pytest.approx(2.0)
    with pytest.raises(InvalidArgument):
        t_score(1.0, ref_sd=0.0)


def test_calibration_recovers_noiseless_lines():
    averages = [1100.0, 1200.0, 1350.0, 1500.0, 1725.0]
    cases = [(a, 0.00035 * a + 0.05, 0.2 * a - 30.0) for a in averages]
    calibration = fit_bmd_calibration(cases, t=1000.0)
    assert calibration.dxa.slope == pytest.approx(0.00035)
    assert calibration.dxa.intercept == pytest.approx(0.05)
    assert calibration.qct.slope == pytest.approx(0.2)
    assert calibration.qct.intercept == pytest.approx(-30.0)
    assert calibration.dxa.residual_se == pytest.approx(0.0, abs=1e-12)
    assert calibration.threshold_t == 1000.0


def test_calibration_rejects_identical_averages():
    cases = [(1200.0, 0.8, 200.0), (1200.0, 0.9, 210.0), (1200.0, 1.0, 220.0)]
    with pytest.raises(SingularFitError):
        fit_bmd_calibration(cases)
    with pytest.raises(SingularFitError):
        fit_bmd_calibration([(1200.0, 0.8, 200.0)])


def test_estimate_from_drr():
    drr = density_image([[900.0, 1000.0], [1100.0, 500.0]])
    estimate = estimate_from_drr(drr, make_calibration())
    assert estimate.pf_average == pytest.approx(1050.0)
    assert estimate.predicted_dxa_bmd == pytest.approx(0.85)
    assert estimate.predicted_qct_bmd == pytest.approx(535.0)
    assert estimate.t_score == pytest.approx(-0.25)
    assert not estimate.degenerate


def test_degenerate_estimate_uses_intercepts():
    estimate = estimate_from_drr(density_image([[1.0, 2.0]]), make_calibration())
    assert estimate.degenerate
    assert estimate.pf_average == 0.0
    assert estimate.predicted_dxa_bmd == pytest.approx(-0.2)
    assert estimate.predicted_qct_bmd == pytest.approx(10.0)


def test_calibration_record_round_trip(tmp_path):
    calibration = make_calibration().copy(update={"config_hash": "c0ffee", "manifest_hash": "beef"})
    path = tmp_path / "calibration.json"
    write_calibration(calibration, path)
    assert read_calibration(path) == calibration
    with pytest.raises(ValueError):
        BMDCalibration(dxa=calibration.dxa, qct=calibration.qct, ref_sd=0.0)


def stage_checkpoint(stage, generator_config, discriminator_config) -> GeneratorCheckpoint:
    return GeneratorCheckpoint(
        sidecar=CheckpointSidecar(
            stage=stage,
            epoch=1,
            generator_config=generator_config,
            discriminator_config=discriminator_config,
            loss_weights=LossWeights(),
            rng_seed=0,
            manifest_hash="abc",
        ),
        generator=build_generator(generator_config, seed=0),
    )


def test_predict_bmd_on_raw_xray(tiny_store, toy_generator_config, toy_discriminator_config):
    checkpoint = stage_checkpoint(2, toy_generator_config, toy_discriminator_config)
    manifest = tiny_store.manifest
    xray = tiny_store.xray(tiny_store.entries(Split.TEST)[0])
    calibration = make_calibration(t=-math.inf)
    estimate, drr = predict_bmd(
        checkpoint, xray, calibration, manifest.xray_normalization, manifest.normalization
    )
    assert drr.unit == ImageUnit.DENSITY_LINE_INTEGRAL
    assert drr.pixels.shape == xray.pixels.shape
    assert estimate.pf_average == pytest.approx(float(drr.pixels.astype(np.float64).mean()), rel=1e-6)
    assert estimate.predicted_dxa_bmd == pytest.approx(calibration.dxa.predict(estimate.pf_average))

    again, _ = predict_bmd(
        checkpoint, xray, calibration, manifest.xray_normalization, manifest.normalization
    )
    assert again == estimate


def test_predict_bmd_flags_degenerate_prediction(
    tiny_store, toy_generator_config, toy_discriminator_config
):
    checkpoint = stage_checkpoint(2, toy_generator_config, toy_discriminator_config)
    manifest = tiny_store.manifest
    xray = tiny_store.xray(tiny_store.entries(Split.TEST)[0])
    # the denormalized output never exceeds the target normalization scale
    calibration = make_calibration(t=2.0 * manifest.normalization.scale + manifest.normalization.offset)
    estimate, _ = predict_bmd(
        checkpoint, xray, calibration, manifest.xray_normalization, manifest.normalization
    )
    assert estimate.degenerate
    assert estimate.predicted_dxa_bmd == pytest.approx(calibration.dxa.intercept)


def test_predict_bmd_requires_stage2(tiny_store, toy_generator_config, toy_discriminator_config):
    checkpoint = stage_checkpoint(1, toy_generator_config, toy_discriminator_config)
    manifest = tiny_store.manifest
    xray = tiny_store.xray(tiny_store.entries(Split.TEST)[0])
    with pytest.raises(StageMismatch):
        predict_bmd(
            checkpoint, xray, make_calibration(), manifest.xray_normalization, manifest.normalization
        )


def test_masked_average_is_at_least_threshold(rng):
    drr = density_image(rng.uniform(0.0, 2000.0, size=(16, 16)))
    for t in [-5.0, 0.0, 250.0, 1000.0, float(np.quantile(drr.pixels, 0.99))]:
        average = masked_average(drr, t)
        assert not average.degenerate
        assert average.value >= t - 1e-9


def test_calibration_recovers_manifest_constants(tmp_path, tiny_spec):
    dataset = DatasetConfig(n_cases=4, canvas_width=64, canvas_height=64, dxa_noise_sigma=0.0)
    manifest = generate_dataset(
        tiny_spec, n_cases=4, split_fraction=0.75, rng_seed=11, out_dir=tmp_path, dataset=dataset
    )
    train = manifest.entries_in(Split.TRAIN)
    assert len({entry.true_pf_average for entry in train}) == len(train)
    calibration = fit_bmd_calibration(
        [(entry.true_pf_average, entry.true_dxa_bmd, entry.true_qct_bmd) for entry in train],
        t=manifest.dxa_truth.threshold_t,
    )
    assert calibration.dxa.slope == pytest.approx(manifest.dxa_truth.a_known, rel=1e-6)
    assert calibration.dxa.intercept == pytest.approx(manifest.dxa_truth.b_known, rel=1e-6)


def identity_checkpoint(toy_generator_config, toy_discriminator_config) -> GeneratorCheckpoint:
    checkpoint = stage_checkpoint(2, toy_generator_config, toy_discriminator_config)
    identity = torch.nn.Conv2d(1, 1, kernel_size=1)
    with torch.no_grad():
        identity.weight.fill_(1.0)
        identity.bias.zero_()
    return dataclasses.replace(checkpoint, generator=identity)


def test_predict_bmd_ignores_normalization_constants(
    tiny_store, toy_generator_config, toy_discriminator_config
):
    checkpoint = identity_checkpoint(toy_generator_config, toy_discriminator_config)
    xray = tiny_store.xray(tiny_store.entries(Split.TEST)[0])
    low, high = float(xray.pixels.min()), float(xray.pixels.max())
    span = high - low + 1.0
    middle = (low + high) / 2.0
    # threshold in the widest gap between pixel values, away from every pixel
    values = np.unique(xray.pixels.astype(np.float64))
    widest = int(np.argmax(np.diff(values)))
    calibration = make_calibration(t=float(values[widest] + values[widest + 1]) / 2.0)

    estimates = []
    for normalization in [
        Normalization(scale=span, offset=middle),
        Normalization(scale=3.0 * span, offset=middle + span / 2.0),
    ]:
        estimate, drr = predict_bmd(checkpoint, xray, calibration, normalization, normalization)
        np.testing.assert_allclose(drr.pixels, xray.pixels, rtol=0.0, atol=1e-5 * span)
        estimates.append(estimate)
    first, second = estimates
    assert not first.degenerate
    assert second.pf_average == pytest.approx(first.pf_average, rel=1e-4)


@pytest.mark.slow
def test_overfit_case_recovers_proximal_average(
    tmp_path, tiny_dataset_dir, tiny_store, toy_generator_config, toy_discriminator_config
):
    manifest = tiny_store.manifest
    case = manifest.entries_in(Split.TRAIN)[0]
    one_case = manifest.copy(update={"entries": [case] + manifest.entries_in(Split.TEST)})
    store = CaseStore(one_case, tiny_dataset_dir)
    context = TrainingContext(
        store=store,
        manifest_hash="overfit",
        generator_config=toy_generator_config,
        discriminator_config=toy_discriminator_config,
        loss_weights=LossWeights(),
        out_dir=tmp_path,
        seed=0,
        hierarchical=False,
    )
    stage_config = default_stage_config(StageName.STAGE2).copy(
        update={
            "epochs": 300,
            "batch_size": 1,
            "augment": AugmentParams.disabled(),
            "tracking_cases": 1,
            "snapshot_every": 0,
        }
    )
    checkpoint = train_stage(stage_config, context)

    calibration = make_calibration(t=manifest.dxa_truth.threshold_t)
    estimate, _ = predict_bmd(
        checkpoint, store.xray(case), calibration, manifest.xray_normalization, manifest.normalization
    )
    assert estimate.pf_average == pytest.approx(case.true_pf_average, rel=0.05)
