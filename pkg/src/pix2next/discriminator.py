"""Multi-scale patch discriminators.

Three identical-architecture discriminators score the target band at full,
half, and quarter resolution (the caller builds the pyramid with 2x2 average
pooling). Each is a patch classifier: four 4x4 stride-2 convolutions with
LeakyReLU(0.2), instance normalization on all but the first layer, widths
doubling from 64 up to 512, then a 1-channel scoring head that preserves the
spatial size. Scores are raw logits; each position rates one receptive-field
patch.

Every forward also returns the intermediate activations (the four post-LeakyReLU
features plus the score map) for the feature-matching objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .generator import seeded_init_

logger = logging.getLogger(__name__)

CONDITIONING_MODES = ("unconditional", "rgb-concat")


@dataclass(frozen=True)
class DiscriminatorSpec:
    num_scales: int = 3
    layers: int = 4
    base_width: int = 64
    max_width: int = 512
    leaky_slope: float = 0.2
    conditioning: str = "unconditional"
    in_channels: int = 1
    cond_channels: int = 3

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}, got {self.conditioning!r}")
        if self.num_scales < 1 or self.layers < 1:
            raise ValueError("num_scales and layers must be >= 1")

    @property
    def input_channels(self) -> int:
        extra = self.cond_channels if self.conditioning == "rgb-concat" else 0
        return self.in_channels + extra

    def widths(self) -> list[int]:
        return [min(self.base_width * 2**i, self.max_width) for i in range(self.layers)]


def patch_map_size(s: int, layers: int = 4) -> int:
    """Spatial side of the score map for an s x s input (4x4 stride-2, pad 1, per layer)."""
    for _ in range(layers):
        s = (s + 2 - 4) // 2 + 1
    return s


class PatchDiscriminator(nn.Module):
    """Single-scale patch classifier; returns (score_map, tapped activations)."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        convs = []
        norms = []
        cin = spec.input_channels
        for i, width in enumerate(spec.widths()):
            convs.append(nn.Conv2d(cin, width, 4, stride=2, padding=1))
            norms.append(nn.InstanceNorm2d(width) if i > 0 else nn.Identity())
            cin = width
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.head = nn.Conv2d(cin, 1, 3, padding=1)

    def forward(self, x: torch.Tensor):
        feats = []
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = F.leaky_relu(norm(conv(h)), self.spec.leaky_slope)
            feats.append(h)
        score = self.head(h)
        feats.append(score)
        return score, feats


class MultiScaleDiscriminator(nn.Module):
    """The bank of per-scale discriminators, indexed full -> coarsest."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        self.scales = nn.ModuleList(PatchDiscriminator(spec) for _ in range(spec.num_scales))

    def __len__(self):
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    def __getitem__(self, i):
        return self.scales[i]


def build_discriminators(spec: DiscriminatorSpec, seed: int) -> MultiScaleDiscriminator:
    """Construct the bank with an independent parameter stream per scale."""
    bank = MultiScaleDiscriminator(spec)
    for k, d in enumerate(bank):
        seeded_init_(d, seed * spec.num_scales + k)
    n_params = sum(p.numel() for p in bank.parameters())
    logger.info("discriminator bank built: %d scales, %d parameters", spec.num_scales, n_params)
    return bank


def multiscale_pyramid(x: torch.Tensor, num_scales: int = 3) -> list[torch.Tensor]:
    """[x, x pooled 2x, x pooled 4x, ...] via 2x2 stride-2 average pooling."""
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W), got shape {tuple(x.shape)}")
    factor = 2 ** (num_scales - 1)
    if x.shape[2] % factor != 0 or x.shape[3] % factor != 0:
        raise ValueError(f"spatial size {tuple(x.shape[2:])} must be divisible by {factor}")
    levels = [x]
    for _ in range(num_scales - 1):
        levels.append(F.avg_pool2d(levels[-1], kernel_size=2, stride=2))
    return levels


def score(
    d: PatchDiscriminator,
    images: torch.Tensor,
    condition: torch.Tensor | None = None,
):
    """Score one pyramid level, concatenating the condition when configured."""
    if d.spec.conditioning == "rgb-concat":
        if condition is None:
            raise ValueError("conditional discriminator needs the RGB condition")
        if condition.shape[2:] != images.shape[2:]:
            raise ValueError(
                f"condition spatial size {tuple(condition.shape[2:])} != image {tuple(images.shape[2:])}"
            )
        images = torch.cat([images, condition], dim=1)
    elif condition is not None:
        raise ValueError("unconditional discriminator must not receive a condition")
    return d(images)
