"""
Generator, multi-scale discriminator and direct-regression networks
"""
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidArgument
from .data import (
    DiscriminatorConfig,
    GeneratorBackbone,
    GeneratorConfig,
    RegressorConfig,
    discriminator_channels,
)

INIT_GAIN = 0.02
N_DISCRIMINATOR_SCALES = 3


def init_weights(module: nn.Module) -> None:
    """
    Conv and linear weights from normal(0, 0.02), zero biases, identity group norm affine.
    """
    for submodule in module.modules():
        if isinstance(submodule, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(submodule.weight, 0.0, INIT_GAIN)
            if submodule.bias is not None:
                nn.init.zeros_(submodule.bias)
        elif isinstance(submodule, nn.GroupNorm):
            nn.init.ones_(submodule.weight)
            nn.init.zeros_(submodule.bias)


class ResnetBlock(nn.Module):
    def __init__(self, channels: int, norm_groups: int):
        super().__init__()
        self.conv_block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.GroupNorm(norm_groups, channels),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.GroupNorm(norm_groups, channels),
        )

    def forward(self, value: torch.Tensor) -> torch.Tensor:
        return value + self.conv_block(value)


class Generator(nn.Module):
    """
    Common forward contract of both backbones: (N, 1, H, W) in, (N, 1, H, W) in [-1, 1] out, with
    H and W divisible by 2^n_downsamples.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config

    def check_input(self, value: torch.Tensor) -> None:
        if value.dim() != 4 or value.shape[1] != 1:
            raise InvalidArgument(
                f"Generator expects (N, 1, H, W) input, got {tuple(value.shape)}"
            )
        multiple = self.config.size_multiple
        height, width = value.shape[-2:]
        if height % multiple != 0 or width % multiple != 0:
            raise InvalidArgument(
                f"Input {width}x{height} is not divisible by 2^n_downsamples = {multiple}"
            )

    def forward(self, value: torch.Tensor) -> torch.Tensor:
        self.check_input(value)
        return torch.tanh(self.body(value))

    def body(self, value: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class ResnetGlobalGenerator(Generator):
    """
    Stem conv, strided downsampling convs, residual blocks, mirrored transposed-conv upsampling and
    an output conv.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__(config)
        base = config.base_channels
        groups = config.norm_groups

        layers: List[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, base, kernel_size=7),
            nn.GroupNorm(groups, base),
            nn.ReLU(True),
        ]
        for k in range(config.n_downsamples):
            channels = base * 2 ** k
            layers += [
                nn.Conv2d(channels, channels * 2, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(groups, channels * 2),
                nn.ReLU(True),
            ]
        bottleneck = base * 2 ** config.n_downsamples
        layers += [ResnetBlock(bottleneck, groups) for _ in range(config.n_res_blocks)]
        for k in range(config.n_downsamples, 0, -1):
            channels = base * 2 ** k
            layers += [
                nn.ConvTranspose2d(
                    channels, channels // 2, kernel_size=3, stride=2, padding=1, output_padding=1
                ),
                nn.GroupNorm(groups, channels // 2),
                nn.ReLU(True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(base, 1, kernel_size=7)]
        self.model = nn.Sequential(*layers)

    def body(self, value: torch.Tensor) -> torch.Tensor:
        return self.model(value)


class HRLiteGenerator(Generator):
    """
    Two parallel branches: one at full resolution and one at 1/2^n_downsamples. After every residual
    stage but the last the branches exchange information (upsample + 1x1 conv into the high branch,
    average pool + 1x1 conv into the low branch); the low branch is fused into the high branch once
    more before the output conv.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__(config)
        base = config.base_channels
        groups = config.norm_groups
        low_channels = base * 2 ** config.n_downsamples
        self.factor = config.size_multiple

        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, base, kernel_size=7),
            nn.GroupNorm(groups, base),
            nn.ReLU(True),
        )
        down: List[nn.Module] = []
        for k in range(config.n_downsamples):
            channels = base * 2 ** k
            down += [
                nn.Conv2d(channels, channels * 2, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(groups, channels * 2),
                nn.ReLU(True),
            ]
        self.down = nn.Sequential(*down)

        n_blocks = config.n_res_blocks
        self.high_blocks = nn.ModuleList([ResnetBlock(base, groups) for _ in range(n_blocks)])
        self.low_blocks = nn.ModuleList(
            [ResnetBlock(low_channels, groups) for _ in range(n_blocks)]
        )
        self.low_to_high = nn.ModuleList(
            [nn.Conv2d(low_channels, base, kernel_size=1) for _ in range(n_blocks)]
        )
        self.high_to_low = nn.ModuleList(
            [nn.Conv2d(base, low_channels, kernel_size=1) for _ in range(n_blocks - 1)]
        )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(base, 1, kernel_size=7))

    def _upsample(self, value: torch.Tensor) -> torch.Tensor:
        return F.interpolate(value, scale_factor=self.factor, mode="bilinear", align_corners=False)

    def body(self, value: torch.Tensor) -> torch.Tensor:
        high = self.stem(value)
        low = self.down(high)
        n_blocks = len(self.high_blocks)
        for i in range(n_blocks):
            high = self.high_blocks[i](high)
            low = self.low_blocks[i](low)
            if i < n_blocks - 1:
                high, low = (
                    high + self._upsample(self.low_to_high[i](low)),
                    low + self.high_to_low[i](F.avg_pool2d(high, self.factor)),
                )
        high = high + self._upsample(self.low_to_high[n_blocks - 1](low))
        return self.head(high)


GENERATOR_BACKBONES = {
    GeneratorBackbone.RESNET_GLOBAL: ResnetGlobalGenerator,
    GeneratorBackbone.HR_LITE: HRLiteGenerator,
}


class NLayerDiscriminator(nn.Module):
    """
    PatchGAN over the 2-channel (x-ray, DRR) concatenation. Returns the patch score map (logits)
    and the output of every conv block.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        channels = discriminator_channels(config.base_channels, config.n_layers)
        kw, padw = 4, 1
        blocks: List[nn.Module] = [
            nn.Sequential(
                nn.Conv2d(2, channels[0], kernel_size=kw, stride=2, padding=padw),
                nn.LeakyReLU(0.2, True),
            )
        ]
        for k in range(1, config.n_layers):
            stride = 1 if k == config.n_layers - 1 else 2
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(channels[k - 1], channels[k], kernel_size=kw, stride=stride, padding=padw),
                    nn.GroupNorm(config.norm_groups, channels[k]),
                    nn.LeakyReLU(0.2, True),
                )
            )
        self.blocks = nn.ModuleList(blocks)
        self.score = nn.Conv2d(channels[-1], 1, kernel_size=kw, stride=1, padding=padw)

    def forward(self, value: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        features = []
        for block in self.blocks:
            value = block(value)
            features.append(value)
        return self.score(value), features


def patch_output_size(size: int, n_layers: int) -> int:
    """
    Spatial size of a score map for an input of the given size.
    """
    kw, padw = 4, 1
    for k in range(n_layers):
        stride = 1 if k == n_layers - 1 else 2
        size = (size + 2 * padw - kw) // stride + 1
    return size + 2 * padw - kw + 1


class MultiscaleDiscriminator(nn.Module):
    """
    Three discriminators applied at full, half and quarter resolution; the coarser inputs come from
    2x average pooling.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.scales = nn.ModuleList(
            [NLayerDiscriminator(config) for _ in range(N_DISCRIMINATOR_SCALES)]
        )

    def check_input(self, height: int, width: int) -> None:
        size = min(height, width) // 2 ** (N_DISCRIMINATOR_SCALES - 1)
        if patch_output_size(size, self.config.n_layers) < 1:
            raise InvalidArgument(
                f"Input {width}x{height} is too small for {N_DISCRIMINATOR_SCALES} discriminator "
                f"scales with n_layers={self.config.n_layers}"
            )

    def forward(
        self, xray: torch.Tensor, drr: torch.Tensor
    ) -> List[Tuple[torch.Tensor, List[torch.Tensor]]]:
        if xray.shape != drr.shape:
            raise InvalidArgument(
                f"Discriminator inputs differ in size: {tuple(xray.shape)} and {tuple(drr.shape)}"
            )
        self.check_input(xray.shape[-2], xray.shape[-1])
        value = torch.cat([xray, drr], dim=1)
        outputs = []
        for i, discriminator in enumerate(self.scales):
            if i > 0:
                value = F.avg_pool2d(value, kernel_size=2)
            outputs.append(discriminator(value))
        return outputs


class DirectRegressor(nn.Module):
    """
    Small convolutional regressor from an x-ray to one scalar.
    """

    def __init__(self, config: RegressorConfig):
        super().__init__()
        self.config = config
        base = config.base_channels
        groups = config.norm_groups
        layers: List[nn.Module] = [
            nn.Conv2d(1, base, kernel_size=3, padding=1),
            nn.GroupNorm(groups, base),
            nn.LeakyReLU(0.2, True),
        ]
        for k in range(config.n_downsamples):
            channels = base * 2 ** k
            layers += [
                nn.Conv2d(channels, channels * 2, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(groups, channels * 2),
                nn.LeakyReLU(0.2, True),
            ]
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(base * 2 ** config.n_downsamples, 1)

    def forward(self, value: torch.Tensor) -> torch.Tensor:
        pooled = self.pool(self.features(value)).flatten(1)
        return self.head(pooled).squeeze(1)
