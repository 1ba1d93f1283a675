"""
Synthetic phantom data structures
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Extra, Field, root_validator, validator

from ..imaging.data import Image2D, LinearModel, Side


class BoneLabel(Enum):
    PELVIS = "PELVIS"
    FEMUR = "FEMUR"


class MaskLabel(Enum):
    PELVIS = "PELVIS"
    FEMUR = "FEMUR"
    PROXIMAL_FEMUR = "PROXIMAL_FEMUR"
    # PELVIS ∪ FEMUR
    BONES = "BONES"
    # body ellipsoid minus bones
    SOFT_TISSUE = "SOFT_TISSUE"


class ProjectionAxis(Enum):
    """
    Volume axis along which rays travel. Densities are stored as [z, y, x].
    """

    X = "X"
    Y = "Y"
    Z = "Z"


PROJECTION_ARRAY_AXIS = {ProjectionAxis.X: 2, ProjectionAxis.Y: 1, ProjectionAxis.Z: 0}


class Ellipsoid(BaseModel):
    # voxel coordinates (x, y, z)
    center: Tuple[float, float, float]
    # voxels (x, y, z)
    radii: Tuple[float, float, float]
    # mg/cm³
    density: float = Field(..., ge=0.0)
    label: BoneLabel

    class Config:
        extra = Extra.forbid

    @validator("radii")
    def radii_positive(cls, radii: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if min(radii) <= 0:
            raise ValueError(f"Ellipsoid radii must be positive, got {radii}")
        return radii


class CutPlane(BaseModel):
    """
    Half-space {p : (p - point) . normal >= 0} in voxel coordinates (x, y, z).
    """

    point: Tuple[float, float, float]
    normal: Tuple[float, float, float]

    class Config:
        extra = Extra.forbid

    @validator("normal")
    def normal_nonzero(cls, normal: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if all(component == 0 for component in normal):
            raise ValueError("Cut plane normal must be non-zero")
        return normal


class NoiseSpec(BaseModel):
    # fraction of the maximum noiseless x-ray intensity
    gaussian_sigma: float = Field(0.01, ge=0.0)
    gain_range: Tuple[float, float] = (0.6, 1.4)
    bias_range: Tuple[float, float] = (0.0, 500.0)

    class Config:
        extra = Extra.forbid

    @validator("gain_range")
    def gain_positive(cls, gain_range: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = gain_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"gain_range must satisfy 0 < lo <= hi, got {gain_range}")
        return gain_range

    @validator("bias_range")
    def bias_ordered(cls, bias_range: Tuple[float, float]) -> Tuple[float, float]:
        if bias_range[1] < bias_range[0]:
            raise ValueError(f"bias_range must satisfy lo <= hi, got {bias_range}")
        return bias_range


class JitterSpec(BaseModel):
    """
    Per-case randomization of every bone primitive.
    """

    center_voxels: float = Field(1.5, ge=0.0)
    radius_fraction: float = Field(0.08, ge=0.0, lt=1.0)
    density_fraction: float = Field(0.25, ge=0.0, lt=1.0)

    class Config:
        extra = Extra.forbid


def mirror_primitive(primitive: Ellipsoid, nx: int) -> Ellipsoid:
    x, y, z = primitive.center
    return Ellipsoid(
        center=(nx - 1 - x, y, z),
        radii=primitive.radii,
        density=primitive.density,
        label=primitive.label,
    )


def default_bone_primitives(nx: int = 128) -> List[Ellipsoid]:
    """
    Bilateral hip anatomy for a 128 x 64 x 128 volume at 1 mm spacing. Left-side primitives are
    mirrored to the right side; the sacrum sits on the midline.
    """
    left = [
        Ellipsoid(center=(38, 32, 30), radii=(20, 7, 20), density=160, label=BoneLabel.PELVIS),
        Ellipsoid(center=(44, 32, 52), radii=(12, 10, 8), density=180, label=BoneLabel.PELVIS),
        Ellipsoid(center=(54, 30, 72), radii=(12, 6, 6), density=170, label=BoneLabel.PELVIS),
        Ellipsoid(center=(42, 32, 60), radii=(9, 9, 9), density=220, label=BoneLabel.FEMUR),
        Ellipsoid(center=(34, 32, 68), radii=(9, 6, 6), density=200, label=BoneLabel.FEMUR),
        Ellipsoid(center=(26, 32, 72), radii=(7, 7, 9), density=190, label=BoneLabel.FEMUR),
        Ellipsoid(center=(28, 32, 102), radii=(6, 6, 28), density=300, label=BoneLabel.FEMUR),
    ]
    sacrum = Ellipsoid(
        center=((nx - 1) / 2.0, 36, 34), radii=(10, 8, 16), density=200, label=BoneLabel.PELVIS
    )
    return left + [mirror_primitive(primitive, nx) for primitive in left] + [sacrum]


class PhantomSpec(BaseModel):
    volume_dims: Tuple[int, int, int] = (128, 64, 128)
    # mm
    voxel_spacing: float = Field(1.0, gt=0.0)
    bone_primitives: List[Ellipsoid] = Field(default_factory=default_bone_primitives)
    # mg/cm³ equivalent
    soft_tissue_density: float = Field(40.0, ge=0.0)
    # body ellipsoid radii as fractions of the volume dims (x, y, z)
    body_radii_fraction: Tuple[float, float, float] = (0.48, 0.45, 0.6)
    proximal_cut: CutPlane = CutPlane(point=(0.0, 0.0, 84.0), normal=(0.0, 0.0, -1.0))
    noise: NoiseSpec = NoiseSpec()
    jitter: JitterSpec = JitterSpec()
    projection_axis: ProjectionAxis = ProjectionAxis.Y

    class Config:
        extra = Extra.forbid

    @validator("volume_dims")
    def dims_positive(cls, dims: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if min(dims) <= 0:
            raise ValueError(f"volume_dims must be positive, got {dims}")
        return dims

    @root_validator(skip_on_failure=True)
    def primitives_present(cls, values):
        if not values.get("bone_primitives"):
            raise ValueError("bone_primitives must not be empty")
        return values


class DatasetConfig(BaseModel):
    """
    Dataset-level generation parameters (the "dataset" section of the run config).
    """

    n_cases: int = Field(120, ge=2)
    split_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    canvas_width: int = Field(256, gt=0)
    canvas_height: int = Field(512, gt=0)
    # synthetic DXA-BMD = a_known * PF-DRR average + b_known + N(0, dxa_noise_sigma), g/cm²
    a_known: float = 0.00035
    b_known: float = 0.05
    dxa_noise_sigma: float = Field(0.01, ge=0.0)
    repeat_acquisitions: int = Field(1, ge=0)
    # scanner response: density = ct_slope * raw + ct_intercept
    ct_slope: float = Field(0.75, gt=0.0)
    ct_intercept: float = 5.0
    insert_densities: List[float] = Field(
        default_factory=lambda: [0.0, 50.0, 100.0, 150.0, 200.0]
    )
    insert_noise_sigma: float = Field(1.0, ge=0.0)

    class Config:
        extra = Extra.forbid


@dataclass
class Volume3D:
    dims: Tuple[int, int, int]
    voxel_spacing: float
    # shape (nz, ny, nx), mg/cm³
    densities: np.ndarray
    masks: Dict[MaskLabel, np.ndarray]
    warnings: List[str] = field(default_factory=list)

    def side_mask(self, side: Side) -> np.ndarray:
        """
        Voxels whose x column falls in the given image half, using the same split rule as the
        canvas normalization (odd widths put the extra column on the left).
        """
        nx = self.dims[0]
        left_width = (nx + 1) // 2
        columns = np.arange(nx) < left_width
        if side == Side.RIGHT:
            columns = ~columns
        return np.broadcast_to(columns[None, None, :], self.densities.shape)


@dataclass
class PhantomCase:
    id: str
    side: Side
    volume: Optional[Volume3D]
    xray: Image2D
    drr_stage1: Image2D
    drr_stage2: Image2D
    # g/cm²
    true_dxa_bmd: float
    # mg/cm³
    true_qct_bmd: float
    true_pf_average: float
    ct_calibration: LinearModel
    repeat_xrays: List[Image2D] = field(default_factory=list)
