import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from ..errors import InvalidArgument
from ..imaging.actions import PathLike
from ..imaging.data import Image2D, ImageUnit
from ..utils.settings import BMDGAN_DEVICE
from .data import (
    CheckpointSidecar,
    DiscriminatorConfig,
    GeneratorConfig,
    RegressionSidecar,
    RegressorConfig,
)
from .models import (
    GENERATOR_BACKBONES,
    DirectRegressor,
    Generator,
    MultiscaleDiscriminator,
    init_weights,
)

logger = logging.getLogger(__name__)

SIDECAR_SUFFIX = ".json"


class CheckpointMismatch(InvalidArgument):
    """
    Raised when a checkpoint payload does not match its sidecar.
    """


def _seeded_build(factory, seed: int) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = factory()
        init_weights(module)
    return module


def build_generator(config: GeneratorConfig, seed: int = 0) -> Generator:
    generator_class = GENERATOR_BACKBONES[config.backbone]
    generator = _seeded_build(lambda: generator_class(config), seed)
    logger.debug(
        f"Built {config.backbone.value} generator with {count_parameters(generator)} parameters"
    )
    return generator  # type: ignore


def build_discriminators(config: DiscriminatorConfig, seed: int = 0) -> MultiscaleDiscriminator:
    return _seeded_build(lambda: MultiscaleDiscriminator(config), seed)  # type: ignore


def build_regressor(config: RegressorConfig, seed: int = 0) -> DirectRegressor:
    return _seeded_build(lambda: DirectRegressor(config), seed)  # type: ignore


def count_parameters(module: nn.Module) -> int:
    return sum(parameter.numel() for parameter in module.parameters())


def parameter_checksum(module: nn.Module) -> str:
    """
    sha256 over the state dict, in key order, of names and raw tensor bytes.
    """
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def image_to_tensor(image: Image2D, device: str = BMDGAN_DEVICE) -> torch.Tensor:
    return torch.from_numpy(np.array(image.pixels, dtype=np.float32)).to(device)[None, None]


def images_to_batch(images: List[Image2D], device: str = BMDGAN_DEVICE) -> torch.Tensor:
    stacked = np.stack([image.pixels for image in images]).astype(np.float32)
    return torch.from_numpy(stacked).to(device)[:, None]


def tensor_to_image(value: torch.Tensor, unit: ImageUnit = ImageUnit.NORMALIZED) -> Image2D:
    pixels = value.detach().cpu().double().numpy().reshape(value.shape[-2], value.shape[-1])
    if unit == ImageUnit.NORMALIZED:
        pixels = np.clip(pixels, -1.0, 1.0)
    return Image2D(pixels=pixels, unit=unit)


def generator_forward(generator: Generator, xray: Image2D) -> Image2D:
    """
    Inference-mode forward of one NORMALIZED x-ray.
    """
    if xray.unit != ImageUnit.NORMALIZED:
        raise InvalidArgument(f"Generator input must be NORMALIZED, got {xray.unit.name}")
    device = next(generator.parameters()).device
    was_training = generator.training
    generator.eval()
    try:
        with torch.no_grad():
            output = generator(image_to_tensor(xray, device=str(device)))
    finally:
        generator.train(was_training)
    return tensor_to_image(output[0, 0])


def discriminators_forward(
    stack: MultiscaleDiscriminator, xray: Any, drr: Any
) -> List[Tuple[torch.Tensor, List[torch.Tensor]]]:
    """
    Accepts Image2D or (N, 1, H, W) tensors.
    """
    if isinstance(xray, Image2D) or isinstance(drr, Image2D):
        if not (isinstance(xray, Image2D) and isinstance(drr, Image2D)):
            raise InvalidArgument("xray and drr must both be images or both be tensors")
        if xray.pixels.shape != drr.pixels.shape:
            raise InvalidArgument(
                f"x-ray {xray.pixels.shape} and DRR {drr.pixels.shape} differ in size"
            )
        device = str(next(stack.parameters()).device)
        xray = image_to_tensor(xray, device=device)
        drr = image_to_tensor(drr, device=device)
    return stack(xray, drr)


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def _atomic_torch_save(payload: Dict[str, Any], path: Path) -> None:
    tmp_path = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)


def _atomic_write_text(text: str, path: Path) -> None:
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as ofp:
        ofp.write(text)
        ofp.write("\n")
    os.replace(tmp_path, path)


@dataclass
class GeneratorCheckpoint:
    sidecar: CheckpointSidecar
    generator: Generator
    discriminators: Optional[MultiscaleDiscriminator] = None
    optimizer_g_state: Optional[Dict[str, Any]] = None
    optimizer_d_state: Optional[Dict[str, Any]] = None


def save_checkpoint(checkpoint: GeneratorCheckpoint, path: PathLike) -> Path:
    """
    Writes the torch payload and its JSON sidecar. Both are replaced atomically so that an
    interrupted write leaves the previous checkpoint intact.
    """
    path = Path(path)
    payload: Dict[str, Any] = {
        "generator": checkpoint.generator.state_dict(),
        "generator_checksum": parameter_checksum(checkpoint.generator),
    }
    if checkpoint.discriminators is not None:
        payload["discriminators"] = checkpoint.discriminators.state_dict()
    if checkpoint.optimizer_g_state is not None:
        payload["optimizer_g"] = checkpoint.optimizer_g_state
    if checkpoint.optimizer_d_state is not None:
        payload["optimizer_d"] = checkpoint.optimizer_d_state
    _atomic_torch_save(payload, path)
    _atomic_write_text(checkpoint.sidecar.json(sort_keys=True, indent=2), sidecar_path(path))
    logger.info(
        f"Saved stage {checkpoint.sidecar.stage} checkpoint (epoch {checkpoint.sidecar.epoch}) "
        f"to {path}"
    )
    return path


def read_sidecar(path: PathLike) -> CheckpointSidecar:
    return CheckpointSidecar.parse_file(sidecar_path(path), encoding="utf-8")


def load_checkpoint(path: PathLike, device: str = BMDGAN_DEVICE) -> GeneratorCheckpoint:
    sidecar = read_sidecar(path)
    payload = torch.load(Path(path), map_location=device)

    generator = build_generator(sidecar.generator_config)
    generator.load_state_dict(payload["generator"])
    generator.to(device)
    checksum = payload.get("generator_checksum")
    if checksum is not None and checksum != parameter_checksum(generator):
        raise CheckpointMismatch(f"Generator parameters in {path} do not match their checksum")

    discriminators = None
    if "discriminators" in payload:
        discriminators = build_discriminators(sidecar.discriminator_config)
        discriminators.load_state_dict(payload["discriminators"])
        discriminators.to(device)

    return GeneratorCheckpoint(
        sidecar=sidecar,
        generator=generator,
        discriminators=discriminators,
        optimizer_g_state=payload.get("optimizer_g"),
        optimizer_d_state=payload.get("optimizer_d"),
    )


@dataclass
class RegressionCheckpoint:
    sidecar: RegressionSidecar
    regressor: DirectRegressor

    def predict(self, xray: Image2D) -> float:
        """
        BMD for one NORMALIZED x-ray, in the units of the training targets.
        """
        if xray.unit != ImageUnit.NORMALIZED:
            raise InvalidArgument(f"Regressor input must be NORMALIZED, got {xray.unit.name}")
        device = str(next(self.regressor.parameters()).device)
        was_training = self.regressor.training
        self.regressor.eval()
        try:
            with torch.no_grad():
                standardized = float(self.regressor(image_to_tensor(xray, device=device))[0])
        finally:
            self.regressor.train(was_training)
        return self.sidecar.target_mean + self.sidecar.target_std * standardized


def save_regression_checkpoint(checkpoint: RegressionCheckpoint, path: PathLike) -> Path:
    path = Path(path)
    _atomic_torch_save({"regressor": checkpoint.regressor.state_dict()}, path)
    _atomic_write_text(checkpoint.sidecar.json(sort_keys=True, indent=2), sidecar_path(path))
    logger.info(f"Saved regression baseline (epoch {checkpoint.sidecar.epoch}) to {path}")
    return path


def load_regression_checkpoint(
    path: PathLike, device: str = BMDGAN_DEVICE
) -> RegressionCheckpoint:
    sidecar = RegressionSidecar.parse_file(sidecar_path(path), encoding="utf-8")
    payload = torch.load(Path(path), map_location=device)
    regressor = build_regressor(sidecar.regressor_config)
    regressor.load_state_dict(payload["regressor"])
    regressor.to(device)
    return RegressionCheckpoint(sidecar=sidecar, regressor=regressor)
