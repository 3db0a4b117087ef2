"""U-Net generator and patch-averaging discriminator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError

INIT_STD = 0.02


@dataclass(frozen=True)
class GeneratorConfig:
    input_size: int = 256
    base_channels: int = 64
    depth: int = 8
    dropout_rate: float = 0.5
    dropout_levels: int = 3
    output_activation: str = "tanh"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("generator depth must be >= 1")
        bottleneck = self.input_size / 2 ** self.depth
        if bottleneck < 1 or bottleneck != int(bottleneck):
            raise ConfigError(
                f"input_size {self.input_size} is not 2^{self.depth} x an integer bottleneck"
            )
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.output_activation != "tanh":
            raise ConfigError("output_activation is fixed to tanh")

    @classmethod
    def for_size(cls, input_size: int, **kw) -> "GeneratorConfig":
        return cls(input_size=input_size, depth=int(math.log2(input_size)), **kw)

    def level_channels(self, level: int) -> int:
        """Feature channels produced by encoder level ``level`` (0 = outermost)."""
        return self.base_channels * min(2 ** level, 8)


@dataclass(frozen=True)
class DiscriminatorConfig:
    patch_levels: int = 3
    base_channels: int = 64
    in_channels: int = 6

    def __post_init__(self):
        if self.patch_levels < 1:
            raise ConfigError("patch_levels must be >= 1")


def patch_grid_size(input_size: int, patch_levels: int) -> int:
    """Side of the logit grid: ``patch_levels`` k4/s2/p1 convs, then two k4/s1/p1 convs."""
    n = input_size
    for _ in range(patch_levels):
        n = (n + 2 - 4) // 2 + 1
    for _ in range(2):
        n = (n + 2 - 4) + 1
    return n


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


class UnetGenerator(nn.Module):
    """Encoder/decoder with skip connections, ``depth`` stride-2 levels.

    Encoder level k output is concatenated onto the decoder output of the
    same resolution. Dropout on the ``dropout_levels`` innermost decoder
    levels is the generator's only noise source.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        depth = config.depth
        ch = [config.level_channels(k) for k in range(depth)]

        self.down = nn.ModuleList()
        for k in range(depth):
            in_ch = 3 if k == 0 else ch[k - 1]
            layers = [] if k == 0 else [nn.LeakyReLU(0.2)]
            layers.append(nn.Conv2d(in_ch, ch[k], 4, stride=2, padding=1))
            if 0 < k < depth - 1:
                layers.append(nn.InstanceNorm2d(ch[k]))
            self.down.append(nn.Sequential(*layers))

        # up[k] maps resolution of level k to that of level k-1 (or the output).
        self.up = nn.ModuleList()
        for k in range(depth):
            in_ch = ch[k] if k == depth - 1 else 2 * ch[k]
            out_ch = 3 if k == 0 else ch[k - 1]
            layers = [nn.ReLU(), nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)]
            if k > 0:
                layers.append(nn.InstanceNorm2d(out_ch))
            self.up.append(nn.Sequential(*layers))
        n_drop = min(config.dropout_levels, depth - 1)
        self.dropout_levels = frozenset(range(depth - n_drop, depth))

    def forward(self, x: torch.Tensor, stochastic: bool = True, return_features: bool = False):
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ShapeError(
                f"generator expects N x 3 x {size} x {size}, got {tuple(x.shape)}"
            )
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
        decoder = []
        h = skips[-1]
        for k in reversed(range(self.config.depth)):
            if k < self.config.depth - 1:
                h = torch.cat([h, skips[k]], dim=1)
            h = self.up[k](h)
            if k in self.dropout_levels and self.config.dropout_rate > 0:
                h = F.dropout(h, p=self.config.dropout_rate, training=stochastic)
            decoder.append(h)
        out = torch.tanh(h)
        if return_features:
            return out, skips, decoder
        return out


class PatchDiscriminator(nn.Module):
    """Conditional discriminator scoring overlapping patches of (x, y)."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        nf = config.base_channels
        layers = [nn.Conv2d(config.in_channels, nf, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, config.patch_levels):
            prev, mult = mult, min(2 ** n, 8)
            layers += [
                nn.Conv2d(nf * prev, nf * mult, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nf * mult),
                nn.LeakyReLU(0.2),
            ]
        prev, mult = mult, min(2 ** config.patch_levels, 8)
        layers += [
            nn.Conv2d(nf * prev, nf * mult, 4, stride=1, padding=1),
            nn.InstanceNorm2d(nf * mult),
            nn.LeakyReLU(0.2),
            nn.Conv2d(nf * mult, 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise ShapeError(f"discriminator inputs differ: {tuple(x.shape)} vs {tuple(y.shape)}")
        return self.net(torch.cat([x, y], dim=1))


def config_dict(config) -> dict:
    return asdict(config)
