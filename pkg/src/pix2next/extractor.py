"""Frozen vision-backbone feature extraction.

An extractor turns a batch of RGB images into a grid of feature tokens that the
generator attends over. Every backbone sits behind the same interface and is
frozen: extraction never builds an autograd graph and parameters never update.

Backbones:

* ``identity-stub``: built-in, weight-free to download, fully deterministic.
  Average-pools the image onto a fixed 8x8 grid and applies a seeded linear
  map to ``d_f=64`` dimensions. Exists so the whole pipeline runs offline.
* ``resnet`` / ``vit`` / ``swinv2``: torchvision backbones. Weights come from a
  local state-dict file (the ``weights`` field, or ``<name>.pt`` inside the
  weights directory, see ``resolve_weights_dir``), or ``weights="random"`` for
  a seeded random initialization.
* ``internimage``: loaded from a TorchScript module file; it has no
  torchvision implementation, so the ``weights`` path is required.

``fetch-weights`` in the CLI is the one explicit network step that populates
the weights directory; nothing here touches the network.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

BACKBONES = ("identity-stub", "resnet", "vit", "swinv2", "internimage")

WEIGHTS_DIR_ENV = "PIX2NEXT_WEIGHTS_DIR"

STUB_GRID = 8
STUB_DIM = 64
_STUB_SEED = 1803


@dataclass(frozen=True)
class FeatureMap:
    """Tokens from a frozen backbone: (B, m, d_f) with a row-major source grid."""

    tokens: torch.Tensor
    grid: tuple[int, int]  # (h_f, w_f), h_f * w_f == m
    backbone: str

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ValueError(f"tokens must be (B, m, d_f), got shape {tuple(self.tokens.shape)}")
        h, w = self.grid
        if h * w != self.tokens.shape[1]:
            raise ValueError(f"grid {self.grid} does not match m={self.tokens.shape[1]}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("feature tokens contain non-finite values")

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[2])


@dataclass(frozen=True)
class ExtractorSpec:
    backbone: str = "identity-stub"
    weights: str = ""  # path to local weights, "random", or "" for the registry
    frozen: bool = True

    def __post_init__(self):
        if self.backbone not in BACKBONES and self.backbone != "none":
            raise ValueError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES} or 'none'")
        if not self.frozen:
            raise ValueError("extractors are frozen by design; frozen=false is not supported")


def resolve_weights_dir() -> Path:
    env = os.environ.get(WEIGHTS_DIR_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "pix2next" / "weights"


class Extractor(nn.Module):
    """Common surface: ``extract`` batches, report ``feature_dim`` and grid."""

    name = "base"
    feature_dim = 0

    def __init__(self):
        super().__init__()
        self.calls = 0  # extraction counter, used to assert once-per-step usage

    def _freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def grid_for(self, hw: tuple[int, int]) -> tuple[int, int]:
        raise NotImplementedError

    def forward(self, batch: torch.Tensor) -> FeatureMap:
        raise NotImplementedError

    def extract(self, batch: torch.Tensor) -> FeatureMap:
        """Map (B, 3, H, W) float images in [0, 1] to a FeatureMap.

        Runs under ``no_grad``: the tokens are constants to the caller and the
        same input always yields the same output.
        """
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got shape {tuple(batch.shape)}")
        self.calls += 1
        with torch.no_grad():
            return self.forward(batch)


class IdentityStubExtractor(Extractor):
    """Weightless-download stand-in: 8x8 cell means plus a fixed linear map.

    The image is average-pooled with cell size (H/8, W/8), flattened row-major
    to 64 cells, and each 3-vector of cell means is mapped through a linear
    layer whose weights are drawn once from a fixed seed. The bias keeps the
    tokens nonzero even for an all-black image.
    """

    name = "identity-stub"
    feature_dim = STUB_DIM

    def __init__(self):
        super().__init__()
        gen = torch.Generator().manual_seed(_STUB_SEED)
        self.proj = nn.Linear(3, STUB_DIM)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(self.proj.weight.shape, generator=gen) * 0.5)
            self.proj.bias.copy_(torch.randn(self.proj.bias.shape, generator=gen) * 0.5)
        self._freeze()

    def grid_for(self, hw: tuple[int, int]) -> tuple[int, int]:
        return (STUB_GRID, STUB_GRID)

    def forward(self, batch: torch.Tensor) -> FeatureMap:
        b, _, h, w = batch.shape
        if h % STUB_GRID != 0 or w % STUB_GRID != 0:
            raise ValueError(f"input size ({h}, {w}) must be divisible by {STUB_GRID}")
        cells = F.avg_pool2d(batch, kernel_size=(h // STUB_GRID, w // STUB_GRID))
        tokens = cells.flatten(2).transpose(1, 2)  # (B, 64, 3), row-major cells
        tokens = self.proj(tokens)
        return FeatureMap(tokens=tokens, grid=(STUB_GRID, STUB_GRID), backbone=self.name)


def _require_256(h: int, w: int, name: str):
    if (h, w) != (256, 256):
        raise ValueError(f"{name} backbone expects 256x256 input, got ({h}, {w})")


def _load_or_random(model: nn.Module, spec: ExtractorSpec, seed: int = 0):
    """Fill a torchvision backbone from a local file or a seeded random init."""
    if spec.weights == "random":
        logger.warning("backbone %s initialized with random weights; features are untrained", spec.backbone)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
        return
    path = Path(spec.weights) if spec.weights else resolve_weights_dir() / f"{spec.backbone}.pt"
    if not path.is_file():
        raise FileNotFoundError(
            f"no weights for backbone {spec.backbone!r} at {path}; run "
            f"'pix2next fetch-weights --backbone {spec.backbone}', point the "
            f"'weights' field at a state-dict file, or use weights='random'"
        )
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)


class ResNetExtractor(Extractor):
    """ResNet-50 trunk; tokens are the 8x8 stage-4 grid (d_f=2048)."""

    name = "resnet"
    feature_dim = 2048

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        from torchvision.models import resnet50

        model = resnet50(weights=None)
        _load_or_random(model, spec)
        model.fc = nn.Identity()
        self.model = model
        self._freeze()

    def grid_for(self, hw: tuple[int, int]) -> tuple[int, int]:
        return (hw[0] // 32, hw[1] // 32)

    def forward(self, batch: torch.Tensor) -> FeatureMap:
        b, _, h, w = batch.shape
        _require_256(h, w, self.name)
        m = self.model
        x = m.maxpool(m.relu(m.bn1(m.conv1(batch))))
        for layer in (m.layer1, m.layer2, m.layer3, m.layer4):
            x = layer(x)
        tokens = x.flatten(2).transpose(1, 2)
        return FeatureMap(tokens=tokens, grid=(h // 32, w // 32), backbone=self.name)


class ViTExtractor(Extractor):
    """ViT-B/16 patch tokens after the encoder, class token dropped (d_f=768)."""

    name = "vit"
    feature_dim = 768

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        from torchvision.models import vit_b_16

        model = vit_b_16(weights=None, image_size=256)
        _load_or_random(model, spec)
        self.model = model
        self._freeze()

    def grid_for(self, hw: tuple[int, int]) -> tuple[int, int]:
        return (hw[0] // 16, hw[1] // 16)

    def forward(self, batch: torch.Tensor) -> FeatureMap:
        b, _, h, w = batch.shape
        _require_256(h, w, self.name)
        m = self.model
        x = m._process_input(batch)
        cls = m.class_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        x = m.encoder(x)
        tokens = x[:, 1:, :]
        return FeatureMap(tokens=tokens, grid=(h // 16, w // 16), backbone=self.name)


class SwinV2Extractor(Extractor):
    """SwinV2-T final stage; torchvision keeps it channels-last (d_f=768)."""

    name = "swinv2"
    feature_dim = 768

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        from torchvision.models import swin_v2_t

        model = swin_v2_t(weights=None)
        _load_or_random(model, spec)
        self.model = model
        self._freeze()

    def grid_for(self, hw: tuple[int, int]) -> tuple[int, int]:
        return (hw[0] // 32, hw[1] // 32)

    def forward(self, batch: torch.Tensor) -> FeatureMap:
        b, _, h, w = batch.shape
        _require_256(h, w, self.name)
        x = self.model.features(batch)  # (B, H/32, W/32, C)
        x = self.model.norm(x)
        tokens = x.flatten(1, 2)
        return FeatureMap(tokens=tokens, grid=(h // 32, w // 32), backbone=self.name)


class TorchScriptExtractor(Extractor):
    """Backbone loaded from a TorchScript file (used for internimage).

    The scripted module must map (B, 3, H, W) to either (B, C, h_f, w_f) or
    (B, m, d_f) with a square grid.
    """

    name = "internimage"

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        if not spec.weights:
            raise FileNotFoundError(
                "internimage has no built-in implementation; set 'weights' to a TorchScript module file"
            )
        path = Path(spec.weights)
        if not path.is_file():
            raise FileNotFoundError(f"TorchScript file not found: {path}")
        self.model = torch.jit.load(str(path), map_location="cpu")
        probe = self.model(torch.zeros(1, 3, 256, 256))
        if probe.ndim == 4:
            self.feature_dim = int(probe.shape[1])
            self._grid = (int(probe.shape[2]), int(probe.shape[3]))
        elif probe.ndim == 3:
            side = int(round(probe.shape[1] ** 0.5))
            if side * side != probe.shape[1]:
                raise ValueError(f"cannot infer a square grid from token count {probe.shape[1]}")
            self.feature_dim = int(probe.shape[2])
            self._grid = (side, side)
        else:
            raise ValueError(f"unsupported scripted output shape {tuple(probe.shape)}")
        self._freeze()

    def grid_for(self, hw: tuple[int, int]) -> tuple[int, int]:
        return self._grid

    def forward(self, batch: torch.Tensor) -> FeatureMap:
        b, _, h, w = batch.shape
        _require_256(h, w, self.name)
        out = self.model(batch)
        if out.ndim == 4:
            tokens = out.flatten(2).transpose(1, 2)
        else:
            tokens = out
        return FeatureMap(tokens=tokens, grid=self._grid, backbone=self.name)


def disable() -> None:
    """The null extractor: generators treat it as 'no features, attention is identity'."""
    return None


def build_extractor(spec: ExtractorSpec | None) -> Extractor | None:
    """Construct the backbone named by ``spec``; ``None`` or 'none' disables it."""
    if spec is None or spec.backbone == "none":
        return disable()
    if spec.backbone == "identity-stub":
        return IdentityStubExtractor()
    if spec.backbone == "resnet":
        return ResNetExtractor(spec)
    if spec.backbone == "vit":
        return ViTExtractor(spec)
    if spec.backbone == "swinv2":
        return SwinV2Extractor(spec)
    if spec.backbone == "internimage":
        return TorchScriptExtractor(spec)
    raise ValueError(f"unknown backbone {spec.backbone!r}")
