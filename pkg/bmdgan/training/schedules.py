"""
Per-epoch learning rate policies.
"""
import math

from ..errors import InvalidArgument
from .data import LRPolicy, StageConfig


def lr_linear_decay(epoch: int, lr_initial: float, keep_epochs: int, total_epochs: int) -> float:
    """
    lr_initial for the first keep_epochs epochs, then linear decay reaching 0 at total_epochs.
    """
    if not 0 <= epoch < total_epochs:
        raise InvalidArgument(f"epoch must lie in [0, {total_epochs}), got {epoch}")
    if not 0 <= keep_epochs <= total_epochs:
        raise InvalidArgument(
            f"keep_epochs must lie in [0, {total_epochs}], got {keep_epochs}"
        )
    if epoch < keep_epochs:
        return lr_initial
    return lr_initial * (total_epochs - epoch) / (total_epochs - keep_epochs)


def lr_sgdr(epoch: int, eta_min: float, eta_max: float, T0: int, T_mult: int) -> float:
    """
    Cosine annealing from eta_max to eta_min with warm restarts; the i-th cycle lasts
    T0 * T_mult^i epochs.
    """
    if epoch < 0:
        raise InvalidArgument(f"epoch must be non-negative, got {epoch}")
    if T0 < 1 or T_mult < 1:
        raise InvalidArgument(f"SGDR needs T0 >= 1 and T_mult >= 1, got T0={T0}, T_mult={T_mult}")
    if not eta_max >= eta_min >= 0:
        raise InvalidArgument(
            f"SGDR needs eta_max >= eta_min >= 0, got eta_min={eta_min}, eta_max={eta_max}"
        )

    t_cur = epoch
    t_i = T0
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= T_mult
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


def stage_lr(config: StageConfig, epoch: int) -> float:
    params = config.lr_policy_params
    if config.lr_policy == LRPolicy.LINEAR_DECAY:
        keep = params.keep_epochs if params.keep_epochs is not None else config.epochs // 2
        return lr_linear_decay(epoch, config.lr_initial, keep, config.epochs)
    return lr_sgdr(epoch, params.eta_min, config.lr_initial, params.T0, params.T_mult)
