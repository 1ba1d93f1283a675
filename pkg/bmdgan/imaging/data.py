"""
Image, pair and dataset manifest data structures
"""
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Extra, Field, validator

from ..errors import InvalidArgument


class ImageUnit(Enum):
    """
    Intensity unit of an Image2D. Values are the unit codes of the on-disk container.
    """

    XRAY_RELATIVE = 0
    # mg/cm³ × mm
    DENSITY_LINE_INTEGRAL = 1
    NORMALIZED = 2


class Side(Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"


class HierarchyStage(Enum):
    STAGE1_BONES = "STAGE1_BONES"
    STAGE2_PROXIMAL = "STAGE2_PROXIMAL"


class Split(Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


@dataclass(frozen=True)
class Image2D:
    """
    Single-channel float raster, stored row-major as a (height, width) float32 array.
    """

    pixels: np.ndarray
    unit: ImageUnit

    def __post_init__(self) -> None:
        pixels = np.array(self.pixels, dtype=np.float32, copy=True, order="C")
        if pixels.ndim != 2:
            raise InvalidArgument(f"Image pixels must be 2-dimensional, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise InvalidArgument("Image pixels must be finite")
        if self.unit == ImageUnit.NORMALIZED and pixels.size > 0:
            if pixels.min() < -1.0 or pixels.max() > 1.0:
                raise InvalidArgument("NORMALIZED image values must lie in [-1, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def with_pixels(self, pixels: np.ndarray, unit: Optional[ImageUnit] = None) -> "Image2D":
        return Image2D(pixels=pixels, unit=self.unit if unit is None else unit)


@dataclass(frozen=True)
class ImagePair:
    """
    Registered (x-ray, target DRR) pair. The stage tag decides whether the target is the whole
    pelvis+femur projection or the proximal-region projection.
    """

    id: str
    xray: Image2D
    target: Image2D
    stage: HierarchyStage
    side: Side

    def __post_init__(self) -> None:
        if self.xray.pixels.shape != self.target.pixels.shape:
            raise InvalidArgument(
                f"Pair {self.id}: x-ray {self.xray.pixels.shape} and target "
                f"{self.target.pixels.shape} differ in size"
            )


class LinearModel(BaseModel):
    slope: float
    intercept: float
    residual_se: float = Field(..., ge=0.0)
    n: int = Field(..., ge=2)

    class Config:
        extra = Extra.forbid

    def predict(
        self, x: Union[float, np.ndarray, Iterable[float]]
    ) -> Union[float, np.ndarray]:
        if isinstance(x, (int, float)):
            return self.slope * float(x) + self.intercept
        return self.slope * np.asarray(x, dtype=np.float64) + self.intercept


class Normalization(BaseModel):
    """
    Affine map from raw intensity to NORMALIZED: (raw - offset) / scale.
    """

    scale: float
    offset: float = 0.0

    class Config:
        extra = Extra.forbid

    @validator("scale")
    def scale_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError(f"scale must be positive, got {value}")
        return value


class CanvasSpec(BaseModel):
    width: int = Field(256, gt=0)
    height: int = Field(512, gt=0)

    class Config:
        extra = Extra.forbid


class DXATruth(BaseModel):
    """
    Constants of the synthetic DXA-BMD relation: a_known * PF-DRR average + b_known + noise.
    """

    a_known: float
    b_known: float
    noise_sigma: float = Field(..., ge=0.0)
    threshold_t: float

    class Config:
        extra = Extra.forbid


class ManifestEntry(BaseModel):
    id: str
    xray_path: str
    target_stage1_path: str
    target_stage2_path: str
    # g/cm²
    true_dxa_bmd: float
    # mg/cm³
    true_qct_bmd: float
    split: Split
    side: Side
    true_pf_average: float
    ct_calibration: Optional[LinearModel] = None
    repeat_xray_paths: List[str] = Field(default_factory=list)

    class Config:
        extra = Extra.forbid


class DatasetManifest(BaseModel):
    version: int = 1
    seed: int
    entries: List[ManifestEntry]
    normalization: Normalization
    xray_normalization: Normalization
    canvas: CanvasSpec
    dxa_truth: DXATruth
    config_hash: Optional[str] = None
    bmdgan_version: Optional[str] = None

    class Config:
        extra = Extra.forbid

    @validator("entries")
    def ids_unique(cls, entries: List[ManifestEntry]) -> List[ManifestEntry]:
        seen = set()
        for entry in entries:
            if entry.id in seen:
                raise ValueError(f"Duplicate manifest entry id: {entry.id}")
            seen.add(entry.id)
        return entries

    def entries_in(self, split: Split) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == split]

    def entry(self, case_id: str) -> ManifestEntry:
        for entry in self.entries:
            if entry.id == case_id:
                return entry
        raise KeyError(case_id)
