"""
Network building blocks: MLPs, the convolutional encoder and the transposed
convolutional decoder used by the world models.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from utils.errors import ContractError


def mlp(in_dim: int, out_dim: int, hidden: int, layers: int, activation=nn.ELU) -> nn.Sequential:
    """Stack of `layers` linear layers with activations between them"""
    if layers < 1:
        raise ContractError("an MLP needs at least one layer")
    modules: list[nn.Module] = []
    width = in_dim
    for _ in range(layers - 1):
        modules += [nn.Linear(width, hidden), activation()]
        width = hidden
    modules.append(nn.Linear(width, out_dim))
    return nn.Sequential(*modules)


def zero_init_output(network: nn.Sequential) -> nn.Sequential:
    """Zero the weights and bias of the last linear layer"""
    last = network[-1]
    nn.init.zeros_(last.weight)
    nn.init.zeros_(last.bias)
    return network


def conv_stages(image_size: int) -> int:
    """Number of stride-2 stages between a 4x4 grid and the image"""
    stages = int(round(math.log2(image_size))) - 2
    if stages < 1 or 4 * 2 ** stages != image_size:
        raise ContractError(f"image size must be a power of two >= 8, got {image_size}")
    return stages


class ImageEncoder(nn.Module):
    """Strided CNN from a channel-last image to a feature vector"""

    def __init__(self, channels: int, image_size: int, depth: int, out_dim: int):
        super().__init__()
        self.channels = channels
        self.image_size = image_size
        stages = conv_stages(image_size)

        layers: list[nn.Module] = []
        width = channels
        for i in range(stages):
            layers += [nn.Conv2d(width, depth * 2 ** i, kernel_size=4, stride=2, padding=1), nn.ELU()]
            width = depth * 2 ** i
        self.conv = nn.Sequential(*layers)
        self.head = nn.Linear(width * 16, out_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        batch_shape = image.shape[:-3]
        x = image.reshape(-1, self.image_size, self.image_size, self.channels).permute(0, 3, 1, 2)
        x = self.conv(x).flatten(1)
        return self.head(x).reshape(*batch_shape, -1)


class ConvDecoder(nn.Module):
    """Transposed CNN from a vector to a channel-last image"""

    def __init__(self, in_dim: int, out_channels: int, image_size: int, depth: int):
        super().__init__()
        self.out_channels = out_channels
        self.image_size = image_size
        stages = conv_stages(image_size)
        self.top = depth * 2 ** (stages - 1)

        self.head = nn.Linear(in_dim, self.top * 16)
        layers: list[nn.Module] = []
        width = self.top
        for i in reversed(range(stages)):
            out = out_channels if i == 0 else depth * 2 ** (i - 1)
            layers.append(nn.ConvTranspose2d(width, out, kernel_size=4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.ELU())
            width = out
        self.deconv = nn.Sequential(*layers)

    @staticmethod
    def count_parameters(in_dim: int, out_channels: int, image_size: int, depth: int) -> int:
        """Parameter count of a decoder without building it"""
        stages = conv_stages(image_size)
        width = depth * 2 ** (stages - 1)
        total = in_dim * width * 16 + width * 16
        for i in reversed(range(stages)):
            out = out_channels if i == 0 else depth * 2 ** (i - 1)
            total += width * out * 16 + out
            width = out
        return total

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch_shape = x.shape[:-1]
        y = self.head(x.reshape(-1, x.shape[-1])).reshape(-1, self.top, 4, 4)
        y = self.deconv(y).permute(0, 2, 3, 1)
        return y.reshape(*batch_shape, self.image_size, self.image_size, self.out_channels)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
