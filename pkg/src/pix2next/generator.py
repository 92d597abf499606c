"""Residual encoder-bottleneck-decoder generator with cross-attention injection.

The network maps an RGB image to a single-band prediction in [0, 1]. Widths
scale off ``base_width`` (default 128) as (w, 2w, 4w); the encoder halves the
spatial size at blocks 2/4/6, the decoder mirrors with doublings at 2/4/6, and
three additive skip connections tie encoder stages to the matching decoder
resolutions. Frozen backbone tokens enter through residual cross-attention
blocks: under "EBD" placement at encoder block 7, bottleneck block 2, and
decoder block 1; under "B-only" just the bottleneck site exists.

Feature positions attend over all tokens (scaled dot-product, multi-head); the
image grid is flattened row-major for the query projection. With no FeatureMap
supplied the attention blocks are identity pass-throughs, which is what the
extractor-free ablation runs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .extractor import FeatureMap

logger = logging.getLogger(__name__)

ATTENTION_MODES = ("EBD", "B-only")

# Encoder stage indices (0-based) whose outputs feed the additive skips, keyed
# by which decoder upsample consumes them: after decoder B2 (quarter
# resolution), B4 (half), B6 (full).
_SKIP_SOURCES = {"full": 0, "half": 1, "quarter": 4}


@dataclass(frozen=True)
class GeneratorSpec:
    """Hyperparameters that fully determine the generator graph."""

    base_width: int = 128
    attention: str = "EBD"
    attn_dim: int = 128
    attn_heads: int = 4
    norm_groups: int = 32
    feature_dim: int = 64  # d_f of the extractor the K/V projections accept
    in_channels: int = 3
    out_channels: int = 1
    extractor_enabled: bool = True

    def __post_init__(self):
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if self.base_width % self.norm_groups != 0:
            raise ValueError(
                f"base_width {self.base_width} must be divisible by norm_groups {self.norm_groups}"
            )
        if self.attn_dim % self.attn_heads != 0:
            raise ValueError(f"attn_dim {self.attn_dim} not divisible by attn_heads {self.attn_heads}")

    @property
    def widths(self) -> tuple[int, int, int]:
        w = self.base_width
        return (w, 2 * w, 4 * w)

    def schedule(self) -> dict[str, list[list[tuple]]]:
        """Layer plan per stage, as ("res", cin, cout) / ("down", ch) / ("up", ch) / ("attn", dim, heads).

        The encoder/decoder attention entries appear only under EBD placement.
        """
        w1, w2, w4 = self.widths
        attn = ("attn", self.attn_dim, self.attn_heads)
        ebd = self.attention == "EBD"
        encoder = [
            [("res", w1, w1), ("res", w1, w2), ("res", w2, w2)],
            [("down", w2)],
            [("res", w2, w2), ("res", w2, w4), ("res", w4, w4)],
            [("down", w4)],
            [("res", w4, w4)] * 3,
            [("down", w4)],
            [("res", w4, w4)] + ([attn] if ebd else []),
        ]
        bottleneck = [
            [("res", w4, w4)] * 3,
            [("res", w4, w4), attn, ("res", w4, w4)],
            [("res", w4, w4)] * 3,
        ]
        decoder = [
            [("res", w4, w4)] + ([attn] if ebd else []) + [("res", w4, w4)],
            [("up", w4)],
            [("res", w4, w4), ("res", w4, w2), ("res", w2, w2)],
            [("up", w2)],
            [("res", w2, w2)] * 3,
            [("up", w2)],
            [("res", w2, w1), ("res", w1, w1)],
        ]
        return {"encoder": encoder, "bottleneck": bottleneck, "decoder": decoder}

    def encoder_spatial_trace(self, input_hw: tuple[int, int]) -> list[tuple[int, int]]:
        """Output spatial size of each encoder stage for a given input size."""
        h, w = input_hw
        trace = []
        for stage in self.schedule()["encoder"]:
            if stage[0][0] == "down":
                h, w = h // 2, w // 2
            trace.append((h, w))
        return trace


class ResidualBlock(nn.Module):
    """norm -> SiLU -> 3x3 conv, twice, around an (optionally projected) skip."""

    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class CrossAttention(nn.Module):
    """Residual multi-head cross-attention from image positions to feature tokens.

    Queries come from the row-major flattened feature map, keys/values from the
    extractor tokens; logits are scaled by sqrt(d_k) per head. Called with
    ``features=None`` the block is an exact identity.
    """

    def __init__(self, channels: int, feature_dim: int, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.to_q = nn.Linear(channels, hidden)
        self.to_k = nn.Linear(feature_dim, hidden)
        self.to_v = nn.Linear(feature_dim, hidden)
        self.proj = nn.Linear(hidden, channels)

    def forward(self, x, features: FeatureMap | None = None, return_weights: bool = False):
        if features is None:
            return (x, None) if return_weights else x
        b, c, h, w = x.shape
        tokens = features.tokens
        if tokens.shape[0] != b:
            raise ValueError(f"feature batch {tokens.shape[0]} != image batch {b}")

        def split(t):
            return t.view(b, -1, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.to_q(x.flatten(2).transpose(1, 2)))  # (B, heads, n, d_k)
        k = split(self.to_k(tokens))  # (B, heads, m, d_k)
        v = split(self.to_v(tokens))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = logits.softmax(dim=-1)
        out = weights @ v
        out = out.transpose(1, 2).reshape(b, h * w, self.heads * self.head_dim)
        out = self.proj(out).transpose(1, 2).view(b, c, h, w)
        out = x + out
        return (out, weights) if return_weights else out


class _Stage(nn.Module):
    """One schedule block: an ordered run of res/down/up/attention layers."""

    def __init__(self, layers):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    def forward(self, x, features=None):
        for layer in self.layers:
            x = layer(x, features) if isinstance(layer, CrossAttention) else layer(x)
        return x

    def attention_sites(self) -> int:
        return sum(isinstance(layer, CrossAttention) for layer in self.layers)


def _build_stage(plan: list[tuple], spec: GeneratorSpec) -> _Stage:
    layers = []
    for entry in plan:
        kind = entry[0]
        if kind == "res":
            layers.append(ResidualBlock(entry[1], entry[2], spec.norm_groups))
        elif kind == "down":
            layers.append(Downsample(entry[1]))
        elif kind == "up":
            layers.append(Upsample(entry[1]))
        elif kind == "attn":
            width = next(e[2] for e in plan if e[0] == "res")
            layers.append(CrossAttention(width, spec.feature_dim, entry[1], entry[2]))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return _Stage(layers)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w1, w2, w4 = spec.widths
        plan = spec.schedule()
        self.stem = nn.Conv2d(spec.in_channels, w1, 3, padding=1)
        self.encoder = nn.ModuleList(_build_stage(p, spec) for p in plan["encoder"])
        self.bottleneck = nn.ModuleList(_build_stage(p, spec) for p in plan["bottleneck"])
        self.decoder = nn.ModuleList(_build_stage(p, spec) for p in plan["decoder"])
        self.head_norm = nn.GroupNorm(spec.norm_groups, w1)
        self.head_conv = nn.Conv2d(w1, spec.out_channels, 3, padding=1)

    def attention_site_map(self) -> dict[str, list[int]]:
        """Stage indices (0-based) that contain a cross-attention layer."""
        return {
            name: [i for i, s in enumerate(stages) if s.attention_sites()]
            for name, stages in (
                ("encoder", self.encoder),
                ("bottleneck", self.bottleneck),
                ("decoder", self.decoder),
            )
        }

    def forward(self, x: torch.Tensor, features: FeatureMap | None = None) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (B, {self.spec.in_channels}, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] % 8 != 0 or x.shape[3] % 8 != 0:
            raise ValueError(f"input spatial size {tuple(x.shape[2:])} must be divisible by 8")
        if not self.spec.extractor_enabled:
            features = None
        if features is not None and features.dim != self.spec.feature_dim:
            raise ValueError(
                f"feature dim {features.dim} does not match the generator's expected {self.spec.feature_dim}"
            )

        h = self.stem(x)
        skips = {}
        for i, stage in enumerate(self.encoder):
            h = stage(h, features)
            for name, src in _SKIP_SOURCES.items():
                if i == src:
                    skips[name] = h
        for stage in self.bottleneck:
            h = stage(h, features)

        dec = self.decoder
        h = dec[0](h, features)
        h = dec[1](h) + skips["quarter"]
        h = dec[2](h)
        h = dec[3](h) + skips["half"]
        h = dec[4](h)
        h = dec[5](h) + skips["full"]
        h = dec[6](h)
        return torch.sigmoid(self.head_conv(F.silu(self.head_norm(h))))


def seeded_init_(module: nn.Module, seed: int, std: float = 0.02):
    """Reset every parameter from a generator seeded once for the whole module.

    Conv/linear weights draw from normal(0, std), norm scales are 1, all biases
    0. Iteration follows registration order, so the result is a pure function
    of (module structure, seed).
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def build_generator(spec: GeneratorSpec, seed: int) -> Generator:
    model = Generator(spec)
    seeded_init_(model, seed)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info("generator built: %d parameters (base_width=%d, attention=%s)",
                n_params, spec.base_width, spec.attention)
    return model
