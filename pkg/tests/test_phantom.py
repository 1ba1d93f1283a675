import math

import numpy as np
import pytest

from bmdgan.errors import InvalidArgument, SingularFitError
from bmdgan.imaging.actions import read_manifest
from bmdgan.imaging.data import Image2D, ImageUnit, Side, Split
from bmdgan.phantom.actions import (
    EmptyProximalRegion,
    calibrate_intensity,
    generate_dataset,
    make_phantom_volume,
    project_volume,
    synthesize_case,
    synthesize_xray,
    train_count,
)
from bmdgan.phantom.data import (
    BoneLabel,
    CutPlane,
    DatasetConfig,
    Ellipsoid,
    JitterSpec,
    MaskLabel,
    PhantomSpec,
    ProjectionAxis,
    Volume3D,
)
from bmdgan.utils.settings import MANIFEST_FILENAME

NO_JITTER = JitterSpec(center_voxels=0.0, radius_fraction=0.0, density_fraction=0.0)


def single_primitive_spec(radii) -> PhantomSpec:
    return PhantomSpec(
        volume_dims=(48, 48, 48),
        bone_primitives=[
            Ellipsoid(center=(24.0, 24.0, 24.0), radii=radii, density=1.0, label=BoneLabel.FEMUR)
        ],
        jitter=NO_JITTER,
    )


def volume_from(densities: np.ndarray, mask: np.ndarray, spacing: float = 1.0) -> Volume3D:
    nz, ny, nx = densities.shape
    return Volume3D(
        dims=(nx, ny, nz),
        voxel_spacing=spacing,
        densities=densities,
        masks={MaskLabel.FEMUR: mask},
    )


def test_rasterized_ellipsoid_volume():
    radii = (16.0, 12.0, 10.0)
    volume = make_phantom_volume(single_primitive_spec(radii), rng_seed=0)
    count = int(volume.masks[MaskLabel.FEMUR].sum())
    analytic = 4.0 / 3.0 * math.pi * radii[0] * radii[1] * radii[2]
    assert abs(count - analytic) / analytic < 0.02
    assert not volume.warnings


def test_primitive_outside_volume_is_dropped_with_warning():
    spec = PhantomSpec(
        volume_dims=(16, 16, 16),
        bone_primitives=[
            Ellipsoid(center=(100.0, 100.0, 100.0), radii=(2, 2, 2), density=1.0, label=BoneLabel.FEMUR)
        ],
        jitter=NO_JITTER,
    )
    volume = make_phantom_volume(spec, rng_seed=0)
    assert len(volume.warnings) == 1
    assert not volume.masks[MaskLabel.FEMUR].any()


def test_phantom_volume_is_deterministic(tiny_spec):
    first = make_phantom_volume(tiny_spec, rng_seed=11)
    second = make_phantom_volume(tiny_spec, rng_seed=11)
    np.testing.assert_array_equal(first.densities, second.densities)
    for label in MaskLabel:
        np.testing.assert_array_equal(first.masks[label], second.masks[label])


def test_masks_partition_bones_and_soft_tissue(tiny_spec):
    volume = make_phantom_volume(tiny_spec, rng_seed=5)
    bones = volume.masks[MaskLabel.BONES]
    assert np.array_equal(bones, volume.masks[MaskLabel.PELVIS] | volume.masks[MaskLabel.FEMUR])
    assert not np.any(bones & volume.masks[MaskLabel.SOFT_TISSUE])
    assert np.all(volume.masks[MaskLabel.PROXIMAL_FEMUR] <= volume.masks[MaskLabel.FEMUR])
    assert volume.masks[MaskLabel.PROXIMAL_FEMUR].any()


def test_uniform_cube_projection_is_exact():
    densities = np.zeros((6, 6, 6))
    mask = np.zeros((6, 6, 6), dtype=bool)
    densities[1:5, 1:5, 1:5] = 3.0
    mask[1:5, 1:5, 1:5] = True
    image = project_volume(volume_from(densities, mask, spacing=2.0), MaskLabel.FEMUR, ProjectionAxis.Y)
    assert image.unit == ImageUnit.DENSITY_LINE_INTEGRAL
    assert image.pixels.shape == (6, 6)
    assert np.all(image.pixels[1:5, 1:5] == 3.0 * 4 * 2.0)
    assert image.pixels[0, 0] == 0.0


def test_sphere_projection_follows_chord_length():
    n, r, d, s = 41, 10.0, 1.5, 1.0
    zz, yy, xx = np.mgrid[0:n, 0:n, 0:n]
    mask = (xx - 20) ** 2 + (yy - 20) ** 2 + (zz - 20) ** 2 <= r ** 2
    densities = np.where(mask, d, 0.0)
    image = project_volume(volume_from(densities, mask, spacing=s), None, ProjectionAxis.Y)
    for rho in [0, 3, 6, 8]:
        expected = 2 * d * s * math.sqrt(r ** 2 - rho ** 2)
        assert abs(float(image.pixels[20, 20 + rho]) - expected) <= d * s + 1e-6


def test_projection_is_linear(rng):
    a = rng.uniform(0, 10, size=(5, 6, 7))
    b = rng.uniform(0, 10, size=(5, 6, 7))
    mask = rng.random((5, 6, 7)) < 0.5
    pa = project_volume(volume_from(a, mask), MaskLabel.FEMUR, ProjectionAxis.Z).pixels
    pb = project_volume(volume_from(b, mask), MaskLabel.FEMUR, ProjectionAxis.Z).pixels
    combined = project_volume(volume_from(2.0 * a + 3.0 * b, mask), MaskLabel.FEMUR, ProjectionAxis.Z)
    np.testing.assert_allclose(combined.pixels, 2.0 * pa + 3.0 * pb, rtol=1e-5)


def test_empty_mask_projects_to_zero():
    densities = np.ones((4, 4, 4))
    volume = volume_from(densities, np.zeros((4, 4, 4), dtype=bool))
    assert not project_volume(volume, MaskLabel.FEMUR, ProjectionAxis.Y).pixels.any()


def test_projection_rejects_unknown_mask():
    volume = volume_from(np.ones((2, 2, 2)), np.ones((2, 2, 2), dtype=bool))
    with pytest.raises(InvalidArgument):
        project_volume(volume, MaskLabel.PELVIS, ProjectionAxis.Y)


def test_calibrate_intensity_exact_line():
    samples = [(raw, 2.0 * raw + 10.0) for raw in [0.0, 1.0, 2.0, 3.0, 4.0]]
    model = calibrate_intensity(samples)
    assert model.slope == pytest.approx(2.0)
    assert model.intercept == pytest.approx(10.0)
    assert model.residual_se == pytest.approx(0.0, abs=1e-12)


def test_calibrate_intensity_noisy_inserts(rng):
    known = np.array([0.0, 50.0, 100.0, 150.0, 200.0])
    true_slope, true_intercept, sigma = 0.75, 5.0, 1.0
    raw = (known - true_intercept) / true_slope
    noisy = known + rng.normal(0.0, sigma, size=known.size)
    model = calibrate_intensity(list(zip(raw, noisy)))

    design = np.column_stack([raw, np.ones_like(raw)])
    oracle_slope, oracle_intercept = np.linalg.solve(design.T @ design, design.T @ noisy)
    assert model.slope == pytest.approx(oracle_slope, rel=1e-9)
    assert model.intercept == pytest.approx(oracle_intercept, rel=1e-9, abs=1e-9)
    slope_se = sigma / math.sqrt(np.sum((raw - raw.mean()) ** 2))
    assert abs(model.slope - true_slope) < 3 * slope_se


def test_calibrate_intensity_needs_two_samples():
    with pytest.raises(SingularFitError):
        calibrate_intensity([(1.0, 2.0)])


def test_synthesize_xray_affine_arithmetic():
    bones = Image2D(pixels=np.full((3, 4), 10.0), unit=ImageUnit.DENSITY_LINE_INTEGRAL)
    soft = Image2D(pixels=np.full((3, 4), 5.0), unit=ImageUnit.DENSITY_LINE_INTEGRAL)
    xray = synthesize_xray(bones, soft, gain=2.0, bias=100.0, gaussian_sigma=0.0, rng_seed=0)
    assert xray.unit == ImageUnit.XRAY_RELATIVE
    assert np.all(xray.pixels == 130.0)

    plain = synthesize_xray(bones, soft, gain=1.0, bias=0.0, gaussian_sigma=0.0, rng_seed=0)
    assert np.all(plain.pixels == 15.0)


def test_synthesize_xray_noise_is_reproducible(rng):
    bones = Image2D(pixels=rng.uniform(0, 100, (8, 8)), unit=ImageUnit.DENSITY_LINE_INTEGRAL)
    soft = Image2D(pixels=rng.uniform(0, 100, (8, 8)), unit=ImageUnit.DENSITY_LINE_INTEGRAL)
    first = synthesize_xray(bones, soft, 1.0, 0.0, 0.05, rng_seed=42)
    second = synthesize_xray(bones, soft, 1.0, 0.0, 0.05, rng_seed=42)
    third = synthesize_xray(bones, soft, 1.0, 0.0, 0.05, rng_seed=43)
    np.testing.assert_array_equal(first.pixels, second.pixels)
    assert not np.array_equal(first.pixels, third.pixels)


def test_synthesize_case_true_qct_is_proximal_mean(tiny_spec, tiny_dataset_config):
    case = synthesize_case(tiny_spec, tiny_dataset_config, rng_seed=7, index=2)
    volume = case.volume
    nx = volume.dims[0]
    columns = np.arange(nx) < (nx + 1) // 2
    if case.side == Side.RIGHT:
        columns = ~columns
    proximal = volume.masks[MaskLabel.PROXIMAL_FEMUR] & columns[None, None, :]
    assert case.true_qct_bmd == pytest.approx(float(volume.densities[proximal].mean()))
    assert case.id == "case0002"
    assert case.xray.pixels.shape == (64, 64)
    assert case.drr_stage2.pixels.shape == (64, 64)
    assert len(case.repeat_xrays) == tiny_dataset_config.repeat_acquisitions


def test_proximal_drr_never_exceeds_bones_drr(tiny_spec, tiny_dataset_config):
    for index in range(3):
        case = synthesize_case(tiny_spec, tiny_dataset_config, rng_seed=5, index=index)
        assert case.drr_stage2.pixels.max() > 0.0
        assert np.all(case.drr_stage2.pixels <= case.drr_stage1.pixels + 1e-3)


def test_synthesize_case_dxa_truth_follows_known_line(tiny_spec):
    dataset = DatasetConfig(canvas_width=64, canvas_height=64, dxa_noise_sigma=0.0)
    case = synthesize_case(tiny_spec, dataset, rng_seed=3, index=0)
    assert case.true_pf_average > 1000.0
    assert case.true_dxa_bmd == pytest.approx(
        dataset.a_known * case.true_pf_average + dataset.b_known, rel=1e-9
    )


def test_synthesize_case_is_deterministic(tiny_spec, tiny_dataset_config):
    first = synthesize_case(tiny_spec, tiny_dataset_config, rng_seed=9, index=1)
    second = synthesize_case(tiny_spec, tiny_dataset_config, rng_seed=9, index=1)
    np.testing.assert_array_equal(first.xray.pixels, second.xray.pixels)
    assert first.true_dxa_bmd == second.true_dxa_bmd
    assert first.side == second.side


def test_empty_proximal_region_is_rejected(tiny_spec, tiny_dataset_config):
    spec = tiny_spec.copy(
        update={"proximal_cut": CutPlane(point=(0.0, 0.0, 1000.0), normal=(0.0, 0.0, 1.0))}
    )
    with pytest.raises(EmptyProximalRegion):
        synthesize_case(spec, tiny_dataset_config, rng_seed=0, index=0)


def test_projection_along_x_is_rejected(tiny_spec, tiny_dataset_config):
    spec = tiny_spec.copy(update={"projection_axis": ProjectionAxis.X})
    with pytest.raises(InvalidArgument):
        synthesize_case(spec, tiny_dataset_config, rng_seed=0, index=0)


def test_train_count():
    assert train_count(10, 0.8) == 8
    assert train_count(6, 0.67) == 4
    assert train_count(2, 0.99) == 1


def test_generated_dataset_splits(tiny_store):
    manifest = tiny_store.manifest
    assert len(manifest.entries_in(Split.TRAIN)) == 4
    assert len(manifest.entries_in(Split.TEST)) == 2
    assert manifest.canvas.width == 64
    assert manifest.normalization.scale > 0
    assert manifest.normalization.offset == 0.0
    ids = [entry.id for entry in manifest.entries]
    assert ids == sorted(ids)
    for entry in manifest.entries:
        assert len(entry.repeat_xray_paths) == 1


def test_generate_dataset_is_deterministic(tmp_path, tiny_spec):
    dataset = DatasetConfig(n_cases=3, canvas_width=32, canvas_height=32)
    first = tmp_path / "first"
    second = tmp_path / "second"
    generate_dataset(tiny_spec, 3, 0.67, 5, first, dataset=dataset, workers=1)
    generate_dataset(tiny_spec, 3, 0.67, 5, second, dataset=dataset, workers=3)
    assert (first / MANIFEST_FILENAME).read_bytes() == (second / MANIFEST_FILENAME).read_bytes()
    manifest = read_manifest(first / MANIFEST_FILENAME)
    for entry in manifest.entries:
        assert (first / entry.xray_path).read_bytes() == (second / entry.xray_path).read_bytes()


def test_generate_dataset_rejects_bad_split(tmp_path, tiny_spec):
    with pytest.raises(InvalidArgument):
        generate_dataset(tiny_spec, 4, 1.0, 0, tmp_path)
