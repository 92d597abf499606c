"""Training objectives: adversarial, SSIM, and feature-matching terms.

The generator minimizes

    sum_k L_GAN_k  +  lambda_fm * L_FM  +  lambda_ssim * L_SSIM

over the three discriminator scales. The adversarial terms use sigmoid
cross-entropy on patch logits (non-saturating for the generator); least-squares
is available behind ``gan_form="lsgan"``. L_SSIM is 1 - mean SSIM, so it lives
in [0, 2]. L_FM averages absolute differences between real and generated
discriminator activations layer by layer, with the real side detached.

``ssim_map`` here is the one SSIM implementation in the package; the metrics
module reuses it so the loss and the reported metric can never drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class SSIMParams:
    """Gaussian-window SSIM constants for a given dynamic range L."""

    window_size: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window_size % 2 != 1 or self.window_size < 3:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.sigma <= 0 or self.dynamic_range <= 0:
            raise ValueError("sigma and dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossWeights:
    lambda_fm: float = 10.0
    lambda_ssim: float = 10.0

    def __post_init__(self):
        if self.lambda_fm < 0 or self.lambda_ssim < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    gan: float
    fm: float
    ssim: float
    total: float
    gan_per_scale: list[float] = field(default_factory=list)


def gaussian_window(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    """Normalized 2-D Gaussian window of the given side length (sums to 1)."""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    window = g[:, None] * g[None, :]
    return (window / window.sum()).to(dtype)


def ssim_map(x: torch.Tensor, y: torch.Tensor, params: SSIMParams = SSIMParams()):
    """Per-pixel SSIM over valid window positions, plus its mean.

    Inputs are (B, 1, H, W) in [0, 1]. Local means, variances, and covariance
    come from Gaussian-weighted sums; no padding, so the map loses
    window_size - 1 pixels per side. Returns (map, mean_ssim).
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (B, 1, H, W), got {tuple(x.shape)}")
    if x.shape[2] < params.window_size or x.shape[3] < params.window_size:
        raise ValueError(
            f"image {tuple(x.shape[2:])} is smaller than the {params.window_size}px SSIM window"
        )
    window = gaussian_window(params.window_size, params.sigma, dtype=x.dtype)
    kernel = window.view(1, 1, params.window_size, params.window_size).to(x.device)

    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    mu_xx = F.conv2d(x * x, kernel)
    mu_yy = F.conv2d(y * y, kernel)
    mu_xy = F.conv2d(x * y, kernel)

    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y

    c1, c2 = params.c1, params.c2
    numer = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denom = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    smap = numer / denom
    return smap, smap.mean()


def ssim_loss(x: torch.Tensor, y: torch.Tensor, params: SSIMParams = SSIMParams()) -> torch.Tensor:
    """1 - mean SSIM; 0 at equality, bounded by 2."""
    _, mean = ssim_map(x, y, params)
    return 1.0 - mean


def gan_loss(
    real_scores: torch.Tensor | None,
    fake_scores: torch.Tensor,
    role: str,
    form: str = "bce",
) -> torch.Tensor:
    """Adversarial loss over patch logits for one scale.

    role="discriminator": mean of the real-is-real and fake-is-fake terms, so
    all-zero logits give ln 2 under "bce". role="generator": non-saturating
    fake-is-real term (``real_scores`` is ignored and may be None). The "bce"
    form uses the overflow-safe log-sum-exp formulation; "lsgan" uses least
    squares against 1/0 targets.
    """
    if role not in ("discriminator", "generator"):
        raise ValueError(f"role must be 'discriminator' or 'generator', got {role!r}")
    if form not in ("bce", "lsgan"):
        raise ValueError(f"form must be 'bce' or 'lsgan', got {form!r}")

    def toward(scores, target):
        labels = torch.full_like(scores, target)
        if form == "bce":
            return F.binary_cross_entropy_with_logits(scores, labels)
        return F.mse_loss(scores, labels)

    if role == "generator":
        return toward(fake_scores, 1.0)
    if real_scores is None:
        raise ValueError("discriminator loss needs real scores")
    return 0.5 * (toward(real_scores, 1.0) + toward(fake_scores, 0.0))


def feature_matching_loss(real_feats, fake_feats) -> torch.Tensor:
    """Mean absolute difference between tapped activations, summed over taps.

    ``real_feats`` / ``fake_feats`` are lists (one per scale) of lists (one per
    tap) of matching-shape tensors. The real side is detached so this term only
    trains the generator. Each tap contributes its element-wise mean absolute
    difference, i.e. an L1 normalized by the tap's element count.
    """
    if len(real_feats) != len(fake_feats):
        raise ValueError(f"scale count mismatch: {len(real_feats)} vs {len(fake_feats)}")
    total = None
    for k, (real_scale, fake_scale) in enumerate(zip(real_feats, fake_feats)):
        if len(real_scale) != len(fake_scale):
            raise ValueError(f"tap count mismatch at scale {k}: {len(real_scale)} vs {len(fake_scale)}")
        for r, f in zip(real_scale, fake_scale):
            if r.shape != f.shape:
                raise ValueError(f"tap shape mismatch at scale {k}: {tuple(r.shape)} vs {tuple(f.shape)}")
            term = (r.detach() - f).abs().mean()
            total = term if total is None else total + term
    if total is None:
        raise ValueError("no features to match")
    return total


def total_generator_loss(
    gan_terms,
    fm: torch.Tensor,
    ssim: torch.Tensor,
    weights: LossWeights = LossWeights(),
):
    """Combine per-scale adversarial terms with weighted FM and SSIM losses.

    Returns (total, LossBreakdown). Non-finite components raise rather than
    poison the optimizer step.
    """
    gan_sum = sum(gan_terms)
    total = gan_sum + weights.lambda_fm * fm + weights.lambda_ssim * ssim

    def scalar(v):
        return float(v.detach()) if torch.is_tensor(v) else float(v)

    for name, value in (("gan", gan_sum), ("fm", fm), ("ssim", ssim), ("total", total)):
        if not math.isfinite(scalar(value)):
            raise FloatingPointError(f"non-finite loss component: {name} = {scalar(value)}")
    return total, LossBreakdown(
        gan=scalar(gan_sum),
        fm=scalar(fm),
        ssim=scalar(ssim),
        total=scalar(total),
        gan_per_scale=[scalar(t) for t in gan_terms],
    )
