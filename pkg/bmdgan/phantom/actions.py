import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..bmd.actions import masked_average
from ..errors import InvalidArgument
from ..imaging.actions import (
    PathLike,
    fit_linear,
    normalize_to_canvas,
    write_image,
    write_manifest,
)
from ..imaging.data import (
    CanvasSpec,
    DatasetManifest,
    DXATruth,
    Image2D,
    ImageUnit,
    LinearModel,
    ManifestEntry,
    Normalization,
    Side,
    Split,
)
from ..utils.settings import IMAGES_DIRNAME, MANIFEST_FILENAME, THREAD_WORKERS
from ..version import BMDGAN_VERSION
from .data import (
    PROJECTION_ARRAY_AXIS,
    BoneLabel,
    CutPlane,
    DatasetConfig,
    Ellipsoid,
    JitterSpec,
    MaskLabel,
    PhantomCase,
    PhantomSpec,
    ProjectionAxis,
    Volume3D,
)

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.SeedSequence]

# Headroom on the x-ray normalization range so that repeat acquisitions with a different gain are
# not clipped.
XRAY_RANGE_MARGIN = 1.25


class EmptyProximalRegion(InvalidArgument):
    """
    Raised when the proximal femur mask of the target side contains no voxels.
    """


def jitter_primitive(
    primitive: Ellipsoid, jitter: JitterSpec, rng: np.random.Generator
) -> Ellipsoid:
    center_shift = rng.uniform(-jitter.center_voxels, jitter.center_voxels, size=3)
    radius_factor = 1.0 + rng.uniform(-jitter.radius_fraction, jitter.radius_fraction, size=3)
    density_factor = 1.0 + rng.uniform(-jitter.density_fraction, jitter.density_fraction)
    return Ellipsoid(
        center=tuple(float(c) for c in np.asarray(primitive.center) + center_shift),
        radii=tuple(float(r) for r in np.asarray(primitive.radii) * radius_factor),
        density=float(primitive.density * density_factor),
        label=primitive.label,
    )


def _ellipsoid_box(
    primitive: Ellipsoid, dims: Tuple[int, int, int]
) -> Optional[Tuple[slice, slice, slice]]:
    """
    Voxel bounding box of an ellipsoid as (z, y, x) slices, or None when it lies outside the volume.
    """
    bounds = []
    for c, r, n in zip(primitive.center, primitive.radii, dims):
        lo = max(0, int(math.floor(c - r)))
        hi = min(n, int(math.ceil(c + r)) + 1)
        if lo >= hi:
            return None
        bounds.append(slice(lo, hi))
    x_slice, y_slice, z_slice = bounds
    return z_slice, y_slice, x_slice


def _ellipsoid_inside(primitive: Ellipsoid, box: Tuple[slice, slice, slice]) -> np.ndarray:
    z_slice, y_slice, x_slice = box
    zz, yy, xx = np.ogrid[z_slice, y_slice, x_slice]
    cx, cy, cz = primitive.center
    rx, ry, rz = primitive.radii
    distance = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 + ((zz - cz) / rz) ** 2
    return distance <= 1.0


def cut_halfspace(cut: CutPlane, shape: Tuple[int, int, int]) -> np.ndarray:
    """
    Boolean (z, y, x) array of voxels p with (p - point) . normal >= 0.
    """
    nz, ny, nx = shape
    zz, yy, xx = np.ogrid[0:nz, 0:ny, 0:nx]
    px, py, pz = cut.point
    ux, uy, uz = cut.normal
    return (xx - px) * ux + (yy - py) * uy + (zz - pz) * uz >= 0


def make_phantom_volume(spec: PhantomSpec, rng_seed: Seed) -> Volume3D:
    """
    Rasterizes the body ellipsoid and every (jittered) bone primitive. Overlapping primitives keep
    the maximum density; masks are unions over primitives of each label.
    """
    nx, ny, nz = spec.volume_dims
    shape = (nz, ny, nx)
    rng = np.random.default_rng(rng_seed)

    densities = np.zeros(shape, dtype=np.float64)
    masks: Dict[MaskLabel, np.ndarray] = {
        MaskLabel.PELVIS: np.zeros(shape, dtype=bool),
        MaskLabel.FEMUR: np.zeros(shape, dtype=bool),
    }
    warnings: List[str] = []

    body = Ellipsoid(
        center=((nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0),
        radii=tuple(f * n for f, n in zip(spec.body_radii_fraction, spec.volume_dims)),
        density=spec.soft_tissue_density,
        label=BoneLabel.PELVIS,
    )
    body_mask = np.zeros(shape, dtype=bool)
    body_box = _ellipsoid_box(body, spec.volume_dims)
    if body_box is not None:
        body_mask[body_box] = _ellipsoid_inside(body, body_box)
    densities[body_mask] = spec.soft_tissue_density

    for index, primitive in enumerate(spec.bone_primitives):
        jittered = jitter_primitive(primitive, spec.jitter, rng)
        box = _ellipsoid_box(jittered, spec.volume_dims)
        inside = None if box is None else _ellipsoid_inside(jittered, box)
        if inside is None or not inside.any():
            message = (
                f"Primitive {index} ({primitive.label.value}) at {jittered.center} lies outside "
                f"the {spec.volume_dims} volume"
            )
            logger.warning(message)
            warnings.append(message)
            continue
        region = densities[box]
        densities[box] = np.where(inside, np.maximum(region, jittered.density), region)
        label = MaskLabel(jittered.label.value)
        masks[label][box] |= inside

    masks[MaskLabel.BONES] = masks[MaskLabel.PELVIS] | masks[MaskLabel.FEMUR]
    masks[MaskLabel.PROXIMAL_FEMUR] = masks[MaskLabel.FEMUR] & cut_halfspace(
        spec.proximal_cut, shape
    )
    masks[MaskLabel.SOFT_TISSUE] = body_mask & ~masks[MaskLabel.BONES]

    return Volume3D(
        dims=spec.volume_dims,
        voxel_spacing=spec.voxel_spacing,
        densities=densities,
        masks=masks,
        warnings=warnings,
    )


def project_volume(
    volume: Volume3D,
    mask_label: Optional[MaskLabel],
    axis: ProjectionAxis,
    restrict: Optional[np.ndarray] = None,
) -> Image2D:
    """
    Parallel-ray line integral of density x voxel spacing along the given axis, over voxels in the
    mask (all voxels when mask_label is None), optionally intersected with a boolean restriction.

    Projecting along Y gives a (nz, nx) image, along Z a (ny, nx) image, along X a (nz, ny) image.
    """
    if not isinstance(axis, ProjectionAxis):
        raise InvalidArgument(f"Unknown projection axis: {axis}")
    if mask_label is None:
        mask = None
    elif not isinstance(mask_label, MaskLabel) or mask_label not in volume.masks:
        raise InvalidArgument(f"Unknown mask label: {mask_label}")
    else:
        mask = volume.masks[mask_label]
    if restrict is not None:
        mask = restrict if mask is None else mask & restrict

    integrand = volume.densities.astype(np.float64)
    if mask is not None:
        integrand = np.where(mask, integrand, 0.0)
    line_integral = integrand.sum(axis=PROJECTION_ARRAY_AXIS[axis]) * volume.voxel_spacing
    return Image2D(pixels=line_integral, unit=ImageUnit.DENSITY_LINE_INTEGRAL)


def calibrate_intensity(samples: Sequence[Tuple[float, float]]) -> LinearModel:
    """
    Least-squares line mapping scanner raw values to known insert densities.
    """
    raw_values = [raw for raw, _ in samples]
    known = [density for _, density in samples]
    return fit_linear(raw_values, known)


def synthesize_xray(
    drr_bones: Image2D,
    drr_soft: Image2D,
    gain: float,
    bias: float,
    gaussian_sigma: float,
    rng_seed: Seed,
) -> Image2D:
    """
    gain * (bones + soft) + bias plus zero-mean gaussian noise whose sigma is gaussian_sigma times
    the maximum of the noiseless image.
    """
    if drr_bones.pixels.shape != drr_soft.pixels.shape:
        raise InvalidArgument(
            f"Bone DRR {drr_bones.pixels.shape} and soft tissue DRR "
            f"{drr_soft.pixels.shape} differ in size"
        )
    if not gain > 0:
        raise InvalidArgument(f"gain must be positive, got {gain}")
    if gaussian_sigma < 0:
        raise InvalidArgument(f"gaussian_sigma must be non-negative, got {gaussian_sigma}")

    clean = gain * (
        drr_bones.pixels.astype(np.float64) + drr_soft.pixels.astype(np.float64)
    ) + bias
    if gaussian_sigma > 0:
        sigma = gaussian_sigma * float(np.abs(clean).max())
        noise = np.random.default_rng(rng_seed).normal(0.0, sigma, size=clean.shape)
        clean = clean + noise
    return Image2D(pixels=clean, unit=ImageUnit.XRAY_RELATIVE)


def downsample_spec(spec: PhantomSpec, factor: int) -> PhantomSpec:
    """
    Same physical anatomy on a grid coarser by an integer factor: voxel coordinates shrink and
    the voxel spacing grows, so line integrals keep their magnitude.
    """
    if factor < 1:
        raise InvalidArgument(f"factor must be at least 1, got {factor}")
    if factor == 1:
        return spec.copy(deep=True)

    def coarse(coordinate: float) -> float:
        return (coordinate + 0.5) / factor - 0.5

    dims = tuple(max(1, n // factor) for n in spec.volume_dims)
    primitives = [
        Ellipsoid(
            center=tuple(coarse(c) for c in primitive.center),
            radii=tuple(r / factor for r in primitive.radii),
            density=primitive.density,
            label=primitive.label,
        )
        for primitive in spec.bone_primitives
    ]
    jitter = spec.jitter.copy(update={"center_voxels": spec.jitter.center_voxels / factor})
    cut = CutPlane(
        point=tuple(coarse(c) for c in spec.proximal_cut.point),
        normal=spec.proximal_cut.normal,
    )
    return spec.copy(
        update={
            "volume_dims": dims,
            "voxel_spacing": spec.voxel_spacing * factor,
            "bone_primitives": primitives,
            "jitter": jitter,
            "proximal_cut": cut,
        }
    )


def _calibrated_volume(
    volume: Volume3D, dataset: DatasetConfig, rng: np.random.Generator
) -> Tuple[Volume3D, LinearModel]:
    """
    Simulates a CT acquisition of the volume together with a calibration phantom, fits the phantom
    inserts and converts the scan back to density.
    """
    raw_volume = (volume.densities - dataset.ct_intercept) / dataset.ct_slope
    raw_inserts = [
        (density - dataset.ct_intercept) / dataset.ct_slope
        + rng.normal(0.0, dataset.insert_noise_sigma)
        for density in dataset.insert_densities
    ]
    model = calibrate_intensity(list(zip(raw_inserts, dataset.insert_densities)))
    calibrated = np.clip(model.predict(raw_volume), 0.0, None)
    return (
        Volume3D(
            dims=volume.dims,
            voxel_spacing=volume.voxel_spacing,
            densities=calibrated,
            masks=volume.masks,
            warnings=volume.warnings,
        ),
        model,
    )


def _acquire_xray(
    drr_bones: Image2D,
    drr_soft: Image2D,
    spec: PhantomSpec,
    seed: np.random.SeedSequence,
) -> Image2D:
    gain_seed, noise_seed = seed.spawn(2)
    rng = np.random.default_rng(gain_seed)
    gain = rng.uniform(*spec.noise.gain_range)
    bias = rng.uniform(*spec.noise.bias_range)
    return synthesize_xray(drr_bones, drr_soft, gain, bias, spec.noise.gaussian_sigma, noise_seed)


def synthesize_case(
    spec: PhantomSpec,
    dataset: DatasetConfig,
    rng_seed: int,
    index: int,
    threshold_t: float = 1000.0,
) -> PhantomCase:
    """
    Builds one case from its own RNG stream, derived from (rng_seed, index). Images are returned on
    the canvas of the target side.
    """
    if spec.projection_axis == ProjectionAxis.X:
        raise InvalidArgument("Projection along X does not preserve the left/right image axis")

    case_seed = np.random.SeedSequence([rng_seed, index])
    volume_seed, side_seed, insert_seed, xray_seed, dxa_seed, repeat_seed = case_seed.spawn(6)
    case_id = f"case{index:04d}"

    volume = make_phantom_volume(spec, volume_seed)
    volume, ct_calibration = _calibrated_volume(volume, dataset, np.random.default_rng(insert_seed))
    side = Side.LEFT if np.random.default_rng(side_seed).random() < 0.5 else Side.RIGHT

    side_mask = volume.side_mask(side)
    proximal = volume.masks[MaskLabel.PROXIMAL_FEMUR] & side_mask
    if not proximal.any():
        raise EmptyProximalRegion(f"Case {case_id}: proximal femur region of {side.value} is empty")
    true_qct_bmd = float(volume.densities[proximal].mean())

    axis = spec.projection_axis
    drr_bones = project_volume(volume, MaskLabel.BONES, axis)
    drr_soft = project_volume(volume, MaskLabel.SOFT_TISSUE, axis)
    drr_proximal = project_volume(volume, MaskLabel.PROXIMAL_FEMUR, axis, restrict=side_mask)
    xray = _acquire_xray(drr_bones, drr_soft, spec, xray_seed)
    repeats = [
        _acquire_xray(drr_bones, drr_soft, spec, seed)
        for seed in repeat_seed.spawn(dataset.repeat_acquisitions)
    ]

    def to_canvas(image: Image2D) -> Image2D:
        return normalize_to_canvas(image, side, dataset.canvas_width, dataset.canvas_height)

    drr_stage2 = to_canvas(drr_proximal)
    pf_average = masked_average(drr_stage2, threshold_t)
    if pf_average.degenerate:
        logger.warning(f"Case {case_id}: no proximal pixel reaches the threshold {threshold_t}")
    dxa_noise = np.random.default_rng(dxa_seed).normal(0.0, 1.0) * dataset.dxa_noise_sigma
    true_dxa_bmd = dataset.a_known * pf_average.value + dataset.b_known + dxa_noise

    return PhantomCase(
        id=case_id,
        side=side,
        volume=volume,
        xray=to_canvas(xray),
        drr_stage1=to_canvas(drr_bones),
        drr_stage2=drr_stage2,
        true_dxa_bmd=float(true_dxa_bmd),
        true_qct_bmd=true_qct_bmd,
        true_pf_average=pf_average.value,
        ct_calibration=ct_calibration,
        repeat_xrays=[to_canvas(repeat) for repeat in repeats],
    )


@dataclass
class _CaseRecord:
    entry: ManifestEntry
    xray_min: float
    xray_max: float
    target_max: float


def _generate_and_write(
    index: int,
    spec: PhantomSpec,
    dataset: DatasetConfig,
    rng_seed: int,
    threshold_t: float,
    out_dir: Path,
) -> _CaseRecord:
    case = synthesize_case(spec, dataset, rng_seed, index, threshold_t=threshold_t)

    def save(image: Image2D, suffix: str) -> str:
        relative = f"{IMAGES_DIRNAME}/{case.id}_{suffix}.bdr2"
        write_image(image, out_dir / relative)
        return relative

    entry = ManifestEntry(
        id=case.id,
        xray_path=save(case.xray, "xray"),
        target_stage1_path=save(case.drr_stage1, "stage1"),
        target_stage2_path=save(case.drr_stage2, "stage2"),
        true_dxa_bmd=case.true_dxa_bmd,
        true_qct_bmd=case.true_qct_bmd,
        # Placeholder until the split permutation is drawn
        split=Split.TRAIN,
        side=case.side,
        true_pf_average=case.true_pf_average,
        ct_calibration=case.ct_calibration,
        repeat_xray_paths=[
            save(repeat, f"xray_repeat{r}") for r, repeat in enumerate(case.repeat_xrays)
        ],
    )
    return _CaseRecord(
        entry=entry,
        xray_min=float(case.xray.pixels.min()),
        xray_max=float(case.xray.pixels.max()),
        target_max=float(case.drr_stage1.pixels.max()),
    )


def train_count(n_cases: int, split_fraction: float) -> int:
    return min(max(int(round(n_cases * split_fraction)), 1), n_cases - 1)


def generate_dataset(
    spec: PhantomSpec,
    n_cases: int,
    split_fraction: float,
    rng_seed: int,
    out_dir: PathLike,
    dataset: Optional[DatasetConfig] = None,
    threshold_t: float = 1000.0,
    config_hash: Optional[str] = None,
    workers: Optional[int] = None,
) -> DatasetManifest:
    """
    Generates n_cases phantom cases, writes their canvas images under out_dir/images and the
    manifest to out_dir/manifest.json.

    Cases are generated concurrently; every case draws from its own stream derived from
    (rng_seed, case index), so the output does not depend on the number of workers.
    """
    if n_cases < 2:
        raise InvalidArgument(f"n_cases must be at least 2, got {n_cases}")
    if not 0 < split_fraction < 1:
        raise InvalidArgument(f"split_fraction must lie in (0, 1), got {split_fraction}")
    if dataset is None:
        dataset = DatasetConfig()

    out_path = Path(out_dir)
    os.makedirs(out_path / IMAGES_DIRNAME, exist_ok=True)

    logger.info(f"Generating {n_cases} phantom cases (seed {rng_seed}) in {out_path}")
    generate = partial(
        _generate_and_write,
        spec=spec,
        dataset=dataset,
        rng_seed=rng_seed,
        threshold_t=threshold_t,
        out_dir=out_path,
    )
    with ThreadPoolExecutor(max_workers=workers or THREAD_WORKERS) as executor:
        records = list(executor.map(generate, range(n_cases)))

    n_train = train_count(n_cases, split_fraction)
    order = np.random.default_rng(rng_seed).permutation(n_cases)
    train_indices = set(int(i) for i in order[:n_train])
    entries: List[ManifestEntry] = []
    train_records: List[_CaseRecord] = []
    for index, record in enumerate(records):
        split = Split.TRAIN if index in train_indices else Split.TEST
        entries.append(record.entry.copy(update={"split": split}))
        if split == Split.TRAIN:
            train_records.append(record)

    target_scale = max(record.target_max for record in train_records)
    if not target_scale > 0:
        raise InvalidArgument("Training targets are all zero; check the phantom anatomy")
    xray_lo = min(record.xray_min for record in train_records)
    xray_hi = max(record.xray_max for record in train_records)
    xray_half_range = (xray_hi - xray_lo) / 2.0 * XRAY_RANGE_MARGIN
    xray_normalization = Normalization(
        scale=xray_half_range if xray_half_range > 0 else 1.0,
        offset=(xray_hi + xray_lo) / 2.0,
    )

    manifest = DatasetManifest(
        seed=rng_seed,
        entries=sorted(entries, key=lambda entry: entry.id),
        normalization=Normalization(scale=target_scale, offset=0.0),
        xray_normalization=xray_normalization,
        canvas=CanvasSpec(width=dataset.canvas_width, height=dataset.canvas_height),
        dxa_truth=DXATruth(
            a_known=dataset.a_known,
            b_known=dataset.b_known,
            noise_sigma=dataset.dxa_noise_sigma,
            threshold_t=threshold_t,
        ),
        config_hash=config_hash,
        bmdgan_version=BMDGAN_VERSION,
    )
    write_manifest(manifest, out_path / MANIFEST_FILENAME)
    logger.info(
        f"Wrote manifest with {n_train} TRAIN and {n_cases - n_train} TEST cases to "
        f"{out_path / MANIFEST_FILENAME}"
    )
    return manifest
