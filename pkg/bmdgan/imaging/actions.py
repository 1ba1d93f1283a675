import hashlib
import logging
import os
import struct
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage  # type: ignore

from ..errors import ImageFormatError, InvalidArgument, SingularFitError
from .data import DatasetManifest, Image2D, ImageUnit, LinearModel, Normalization, Side

logger = logging.getLogger(__name__)

IMAGE_MAGIC = b"BDR2"
IMAGE_VERSION = 1
# magic, version u16, unit code u16, width u32, height u32
IMAGE_HEADER = struct.Struct("<4sHHII")

PathLike = Union[str, "os.PathLike[str]"]


class ManifestPathNotFound(InvalidArgument):
    """
    Raised when a manifest references an image file that does not exist.
    """


def split_half(pixels: np.ndarray, side: Side) -> np.ndarray:
    """
    Split at the horizontal center column. Odd widths give the extra column to the left half.
    """
    width = pixels.shape[1]
    left_width = (width + 1) // 2
    if side == Side.LEFT:
        return pixels[:, :left_width]
    return pixels[:, left_width:]


def normalize_to_canvas(image: Image2D, side: Side, canvas_w: int, canvas_h: int) -> Image2D:
    """
    Selects the requested half of the image, rescales it so that it covers the canvas (the edge
    with the larger scale factor fits exactly), and center-crops to canvas_w x canvas_h. Resampling
    is bilinear with pixel-center alignment.
    """
    if canvas_w <= 0 or canvas_h <= 0:
        raise InvalidArgument(f"Canvas must be non-empty, got {canvas_w}x{canvas_h}")
    if image.width <= 1 or image.height == 0:
        raise InvalidArgument(
            f"Image must be wider than 1 pixel and non-empty, got {image.width}x{image.height}"
        )

    half = split_half(image.pixels, side).astype(np.float64)
    half_h, half_w = half.shape
    scale = max(canvas_w / half_w, canvas_h / half_h)
    offset_x = (half_w * scale - canvas_w) / 2.0
    offset_y = (half_h * scale - canvas_h) / 2.0

    cols = (np.arange(canvas_w, dtype=np.float64) + 0.5 + offset_x) / scale - 0.5
    rows = (np.arange(canvas_h, dtype=np.float64) + 0.5 + offset_y) / scale - 0.5
    grid_rows, grid_cols = np.meshgrid(rows, cols, indexing="ij")
    resampled = ndimage.map_coordinates(
        half, [grid_rows, grid_cols], order=1, mode="nearest"
    )
    if image.unit == ImageUnit.NORMALIZED:
        resampled = np.clip(resampled, -1.0, 1.0)
    return image.with_pixels(resampled)


def to_normalized(image: Image2D, scale: float, offset: float) -> Image2D:
    if not scale > 0:
        raise InvalidArgument(f"Normalization scale must be positive, got {scale}")
    values = (image.pixels.astype(np.float64) - offset) / scale
    return Image2D(pixels=np.clip(values, -1.0, 1.0), unit=ImageUnit.NORMALIZED)


def from_normalized(
    image: Image2D,
    scale: float,
    offset: float,
    unit: ImageUnit = ImageUnit.DENSITY_LINE_INTEGRAL,
) -> Image2D:
    if not scale > 0:
        raise InvalidArgument(f"Normalization scale must be positive, got {scale}")
    values = image.pixels.astype(np.float64) * scale + offset
    return Image2D(pixels=values, unit=unit)


def apply_normalization(image: Image2D, normalization: Normalization) -> Image2D:
    return to_normalized(image, normalization.scale, normalization.offset)


def write_image(image: Image2D, path: PathLike) -> None:
    header = IMAGE_HEADER.pack(
        IMAGE_MAGIC, IMAGE_VERSION, image.unit.value, image.width, image.height
    )
    payload = image.pixels.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as ofp:
        ofp.write(header)
        ofp.write(payload)


def read_image(path: PathLike) -> Image2D:
    with open(path, "rb") as ifp:
        raw = ifp.read()

    if len(raw) < IMAGE_HEADER.size:
        raise ImageFormatError("header", f"expected {IMAGE_HEADER.size} bytes, got {len(raw)}")
    magic, version, unit_code, width, height = IMAGE_HEADER.unpack_from(raw, 0)
    if magic != IMAGE_MAGIC:
        raise ImageFormatError("magic", f"expected {IMAGE_MAGIC!r}, got {magic!r}")
    if version != IMAGE_VERSION:
        raise ImageFormatError("version", f"unsupported container version {version}")
    try:
        unit = ImageUnit(unit_code)
    except ValueError:
        raise ImageFormatError("unit", f"unknown unit code {unit_code}")

    expected = width * height * 4
    payload = raw[IMAGE_HEADER.size :]
    if len(payload) < expected:
        raise ImageFormatError(
            "payload",
            f"truncated: {width}x{height} needs {expected} bytes, found {len(payload)}",
        )
    if len(payload) > expected:
        raise ImageFormatError(
            "payload",
            f"dimension mismatch: {width}x{height} needs {expected} bytes, found {len(payload)}",
        )
    pixels = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    try:
        return Image2D(pixels=pixels.astype(np.float32), unit=unit)
    except InvalidArgument as e:
        raise ImageFormatError("payload", str(e))


def fit_linear(x: Sequence[float], y: Sequence[float]) -> LinearModel:
    """
    Closed-form least-squares line of y on x.
    """
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidArgument("Samples must be 1-dimensional and of equal length")
    n = xs.size
    if n < 2:
        raise SingularFitError(f"At least 2 samples are required for a line fit, got {n}")

    x_mean = xs.mean()
    y_mean = ys.mean()
    sxx = float(np.sum((xs - x_mean) ** 2))
    if sxx == 0.0:
        raise SingularFitError("All independent values are identical")
    sxy = float(np.sum((xs - x_mean) * (ys - y_mean)))
    slope = sxy / sxx
    intercept = float(y_mean - slope * x_mean)

    residual_se = 0.0
    if n > 2:
        residuals = ys - (slope * xs + intercept)
        residual_se = float(np.sqrt(np.sum(residuals ** 2) / (n - 2)))
    return LinearModel(slope=slope, intercept=intercept, residual_se=residual_se, n=n)


def write_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    """
    Manifests are written with sorted keys and fixed indentation so that equal manifests are
    byte-identical.
    """
    with open(path, "w", encoding="utf-8") as ofp:
        ofp.write(manifest.json(sort_keys=True, indent=2))
        ofp.write("\n")


def read_manifest(path: PathLike, check_paths: bool = True) -> DatasetManifest:
    manifest = DatasetManifest.parse_file(path, encoding="utf-8")
    if check_paths:
        base_dir = Path(path).parent
        for entry in manifest.entries:
            referenced = [
                entry.xray_path,
                entry.target_stage1_path,
                entry.target_stage2_path,
                *entry.repeat_xray_paths,
            ]
            for relative in referenced:
                if not (base_dir / relative).is_file():
                    raise ManifestPathNotFound(
                        f"Manifest entry {entry.id} references missing file: {relative}"
                    )
    return manifest


def manifest_hash(path: PathLike) -> str:
    with open(path, "rb") as ifp:
        return hashlib.sha256(ifp.read()).hexdigest()


def kfold_split(
    manifest: DatasetManifest, k: int, seed: int
) -> List[Tuple[List[str], List[str]]]:
    """
    Partitions all manifest case ids into k folds. Returns (train_ids, test_ids) per fold.
    """
    ids = sorted(entry.id for entry in manifest.entries)
    if k < 2 or k > len(ids):
        raise InvalidArgument(f"k must be between 2 and {len(ids)}, got {k}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = np.array_split(order, k)
    splits: List[Tuple[List[str], List[str]]] = []
    for fold in folds:
        test_ids = sorted(ids[i] for i in fold)
        test_set = set(test_ids)
        train_ids = [case_id for case_id in ids if case_id not in test_set]
        splits.append((train_ids, test_ids))
    return splits
