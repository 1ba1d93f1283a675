"""
Geometric augmentation applied identically to both images of a pair.

Transforms are built in (row, column) coordinates about the image center; bilinear resampling
fills out-of-bounds pixels with the image minimum.
"""
import math
from typing import Tuple

import numpy as np
from scipy import ndimage  # type: ignore

from ..imaging.data import ImagePair
from .data import AffineDraw, AugmentParams


def sample_affine(params: AugmentParams, rng: np.random.Generator) -> AffineDraw:
    rotation = rng.uniform(-params.rotation_deg, params.rotation_deg)
    shear = rng.uniform(-params.shear_deg, params.shear_deg)
    translate_x = rng.uniform(-params.translate_frac, params.translate_frac)
    translate_y = rng.uniform(-params.translate_frac, params.translate_frac)
    scale = 1.0 + rng.uniform(-params.scale_frac, params.scale_frac)
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    return AffineDraw(
        rotation_deg=float(rotation),
        shear_deg=float(shear),
        translate_x=float(translate_x),
        translate_y=float(translate_y),
        scale=float(scale),
        hflip=bool(params.hflip and hflip),
        vflip=bool(params.vflip and vflip),
    )


def forward_matrix(draw: AffineDraw) -> np.ndarray:
    """
    2x2 linear part mapping input (row, col) offsets from the center to output offsets.
    """
    theta = math.radians(draw.rotation_deg)
    rotation = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(draw.shear_deg)), 1.0]])
    flips = np.diag([-1.0 if draw.vflip else 1.0, -1.0 if draw.hflip else 1.0])
    return rotation @ shear @ (draw.scale * np.eye(2)) @ flips


def inverse_transform(draw: AffineDraw, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    (matrix, offset) such that input = matrix @ output + offset, as scipy.ndimage expects.
    """
    height, width = shape
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    translation = np.array([draw.translate_y * height, draw.translate_x * width])
    inverse = np.linalg.inv(forward_matrix(draw))
    offset = center - inverse @ (center + translation)
    return inverse, offset


def apply_affine(pixels: np.ndarray, draw: AffineDraw) -> np.ndarray:
    values = np.asarray(pixels, dtype=np.float64)
    matrix, offset = inverse_transform(draw, values.shape)
    warped = ndimage.affine_transform(
        values,
        matrix,
        offset=offset,
        order=1,
        mode="constant",
        cval=float(values.min()),
    )
    # bilinear weights are convex; clipping only removes rounding overshoot
    return np.clip(warped, values.min(), values.max())


def augment_pair(pair: ImagePair, params: AugmentParams, rng: np.random.Generator) -> ImagePair:
    draw = sample_affine(params, rng)
    return ImagePair(
        id=pair.id,
        xray=pair.xray.with_pixels(apply_affine(pair.xray.pixels, draw)),
        target=pair.target.with_pixels(apply_affine(pair.target.pixels, draw)),
        stage=pair.stage,
        side=pair.side,
    )
