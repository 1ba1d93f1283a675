"""
Decomposition objective: adversarial, feature matching, L1 and gradient correlation terms.

Every function accepts torch tensors (or numpy arrays, converted to float64 tensors) whose last
two dimensions are image rows and columns, and returns a torch tensor so that the terms can be
back-propagated.
"""
import logging
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import InvalidArgument
from .data import GANMode, LossWeights

logger = logging.getLogger(__name__)

NCC_EPSILON = 1e-8

TensorLike = Union[torch.Tensor, np.ndarray]
ScoreMaps = Union[torch.Tensor, Sequence[torch.Tensor]]
FeatureStack = Union[Sequence[torch.Tensor], Sequence[Sequence[torch.Tensor]]]


def as_tensor(value: TensorLike) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.from_numpy(np.asarray(value, dtype=np.float64))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgument(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def ncc(a: TensorLike, b: TensorLike) -> torch.Tensor:
    """
    Zero-mean normalized cross-correlation over the last two dimensions. Constant inputs give 0.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    _check_same_shape(a, b, "ncc")
    if a.dim() < 2 or a.shape[-1] * a.shape[-2] < 2:
        raise InvalidArgument(f"ncc needs at least 2 pixels, got shape {tuple(a.shape)}")

    a_zm = a - a.mean(dim=(-2, -1), keepdim=True)
    b_zm = b - b.mean(dim=(-2, -1), keepdim=True)
    numerator = (a_zm * b_zm).sum(dim=(-2, -1))
    # vector_norm has a zero subgradient at 0, so constant images do not produce NaN gradients
    denominator = torch.linalg.vector_norm(a_zm, dim=(-2, -1)) * torch.linalg.vector_norm(
        b_zm, dim=(-2, -1)
    )
    return numerator / (denominator + NCC_EPSILON)


def image_gradients(img: TensorLike) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Central differences on the interior and one-sided differences at the borders. Returns
    (gx, gy): gx along the width (columns), gy along the height (rows).
    """
    img = as_tensor(img)
    if img.dim() < 2 or img.shape[-1] < 3 or img.shape[-2] < 3:
        raise InvalidArgument(f"Image gradients need at least 3x3 pixels, got {tuple(img.shape)}")
    gy, gx = torch.gradient(img, dim=(-2, -1), edge_order=1)
    return gx, gy


def gradient_correlation_loss(
    fake: TensorLike, real: TensorLike, literal_sign: bool = False
) -> torch.Tensor:
    """
    2 - ncc(gx_real, gx_fake) - ncc(gy_real, gy_fake), averaged over any leading batch dimensions.
    With literal_sign the sum ncc_x + ncc_y is returned instead.
    """
    fake = as_tensor(fake)
    real = as_tensor(real)
    _check_same_shape(fake, real, "gradient_correlation_loss")
    fake_gx, fake_gy = image_gradients(fake)
    real_gx, real_gy = image_gradients(real)
    correlation = ncc(real_gx, fake_gx) + ncc(real_gy, fake_gy)
    if literal_sign:
        return correlation.mean()
    return (2.0 - correlation).mean()


def l1_loss(fake: TensorLike, real: TensorLike) -> torch.Tensor:
    fake = as_tensor(fake)
    real = as_tensor(real)
    _check_same_shape(fake, real, "l1_loss")
    return torch.mean(torch.abs(fake - real))


def _as_scales(features: FeatureStack) -> List[List[torch.Tensor]]:
    if len(features) > 0 and isinstance(features[0], (torch.Tensor, np.ndarray)):
        return [[as_tensor(f) for f in features]]  # type: ignore
    return [[as_tensor(f) for f in layers] for layers in features]  # type: ignore


def feature_matching_loss(real_feats: FeatureStack, fake_feats: FeatureStack) -> torch.Tensor:
    """
    Sum over discriminator scales and layers of the per-element mean absolute difference between
    real and fake features. Real features are treated as constants.
    """
    real_scales = _as_scales(real_feats)
    fake_scales = _as_scales(fake_feats)
    if len(real_scales) != len(fake_scales):
        raise InvalidArgument(
            f"feature_matching_loss: {len(real_scales)} real and {len(fake_scales)} fake scales"
        )

    total = None
    for scale, (real_layers, fake_layers) in enumerate(zip(real_scales, fake_scales)):
        if len(real_layers) != len(fake_layers):
            raise InvalidArgument(
                f"feature_matching_loss: scale {scale} has {len(real_layers)} real and "
                f"{len(fake_layers)} fake layers"
            )
        for real, fake in zip(real_layers, fake_layers):
            _check_same_shape(real, fake, f"feature_matching_loss (scale {scale})")
            term = F.l1_loss(fake, real.detach())
            total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def _as_score_list(scores: ScoreMaps) -> List[torch.Tensor]:
    if isinstance(scores, (torch.Tensor, np.ndarray)):
        return [as_tensor(scores)]
    return [as_tensor(score) for score in scores]


def _reduce_scales(terms: List[torch.Tensor], scale_reduction: str) -> torch.Tensor:
    stacked = torch.stack(terms)
    if scale_reduction == "mean":
        return stacked.mean()
    if scale_reduction == "sum":
        return stacked.sum()
    raise InvalidArgument(f"Unknown scale reduction: {scale_reduction}")


def adversarial_loss_d(
    real_scores: ScoreMaps,
    fake_scores: ScoreMaps,
    gan_mode: GANMode = GANMode.VANILLA_LOG,
    scale_reduction: str = "mean",
) -> torch.Tensor:
    """
    Discriminator loss, as a value to minimize. Scores are logits; VANILLA_LOG uses
    -log sigmoid(real) - log(1 - sigmoid(fake)) and LEAST_SQUARES (real - 1)^2 + fake^2, each
    averaged over patches, then reduced over scales.
    """
    real_list = _as_score_list(real_scores)
    fake_list = _as_score_list(fake_scores)
    if len(real_list) != len(fake_list):
        raise InvalidArgument(
            f"adversarial_loss_d: {len(real_list)} real and {len(fake_list)} fake score maps"
        )

    terms = []
    for real, fake in zip(real_list, fake_list):
        if gan_mode == GANMode.VANILLA_LOG:
            term = F.binary_cross_entropy_with_logits(
                real, torch.ones_like(real)
            ) + F.binary_cross_entropy_with_logits(fake, torch.zeros_like(fake))
        elif gan_mode == GANMode.LEAST_SQUARES:
            term = torch.mean((real - 1.0) ** 2) + torch.mean(fake ** 2)
        else:
            raise InvalidArgument(f"Unknown GAN mode: {gan_mode}")
        terms.append(term)
    return _reduce_scales(terms, scale_reduction)


def adversarial_loss_g(
    fake_scores: ScoreMaps,
    gan_mode: GANMode = GANMode.VANILLA_LOG,
    scale_reduction: str = "mean",
) -> torch.Tensor:
    """
    Generator loss: non-saturating -log sigmoid(fake) for VANILLA_LOG, (fake - 1)^2 for
    LEAST_SQUARES.
    """
    terms = []
    for fake in _as_score_list(fake_scores):
        if gan_mode == GANMode.VANILLA_LOG:
            term = F.binary_cross_entropy_with_logits(fake, torch.ones_like(fake))
        elif gan_mode == GANMode.LEAST_SQUARES:
            term = torch.mean((fake - 1.0) ** 2)
        else:
            raise InvalidArgument(f"Unknown GAN mode: {gan_mode}")
        terms.append(term)
    return _reduce_scales(terms, scale_reduction)


def total_generator_objective(weights: LossWeights, gan_g, fm, l1, gc):
    return weights.lambda_l1 * l1 + weights.lambda_gc * gc + weights.lambda_fm * fm + gan_g
