"""Evaluation battery: PSNR, SSIM, RMSE, error STD, FID, LPIPS, DISTS.

Pixel metrics run in float64 straight off the image arrays. The perceptual
metrics (LPIPS, DISTS) and FID need a feature backend; ``lightweight-stub`` is
a fixed, seeded conv pyramid that works offline and exists so relative
comparisons and the full reporting path can run without downloaded weights.
``inception-like`` uses a local Inception-v3 state dict when one is available.
A backend that cannot be built marks its metrics as skipped in the report; it
never silently zeroes them.

Directions: PSNR and SSIM are higher-better; RMSE, STD, FID, LPIPS, and DISTS
are lower-better.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import IMAGE_EXTENSIONS, _collapse_to_single_band, _open_decoded
from .extractor import resolve_weights_dir
from .losses import SSIMParams, ssim_map

logger = logging.getLogger(__name__)

DIRECTIONS = {
    "psnr": "higher",
    "ssim": "higher",
    "rmse": "lower",
    "std": "lower",
    "fid": "lower",
    "lpips": "lower",
    "dists": "lower",
}

CSV_HEADER = ["id", "psnr", "ssim", "rmse", "std", "lpips", "dists"]

BACKEND_NAMES = ("lightweight-stub", "inception-like")

_STUB_SEED = 91


class BackendUnavailable(RuntimeError):
    """Raised when a feature backend cannot be constructed (e.g. no weights)."""


# -- pixel metrics --------------------------------------------------------


def _check_pair(gen: np.ndarray, gt: np.ndarray):
    if gen.shape != gt.shape:
        raise ValueError(f"image shape mismatch: {gen.shape} vs {gt.shape}")


def psnr(gen: np.ndarray, gt: np.ndarray, max_value: float = 1.0) -> float:
    """10 * log10(max^2 / MSE); identical images give float('inf')."""
    _check_pair(gen, gt)
    mse = float(np.mean((gen.astype(np.float64) - gt.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(max_value * max_value / mse)


def rmse(gen: np.ndarray, gt: np.ndarray) -> float:
    """Root mean squared error on the 0-255 intensity scale."""
    _check_pair(gen, gt)
    diff = (gen.astype(np.float64) - gt.astype(np.float64)) * 255.0
    return float(np.sqrt(np.mean(diff * diff)))


def pixel_std(gen: np.ndarray, gt: np.ndarray) -> float:
    """Standard deviation of the error map on the 0-255 scale (ddof 0)."""
    _check_pair(gen, gt)
    return float(np.std((gen.astype(np.float64) - gt.astype(np.float64)) * 255.0))


def ssim(gen: np.ndarray, gt: np.ndarray, params: SSIMParams = SSIMParams()) -> float:
    """Mean SSIM, same implementation the training loss uses, in float64."""
    _check_pair(gen, gt)
    x = torch.from_numpy(np.ascontiguousarray(gen, dtype=np.float64))[None, None]
    y = torch.from_numpy(np.ascontiguousarray(gt, dtype=np.float64))[None, None]
    _, mean = ssim_map(x, y, params)
    return float(mean)


# -- Frechet distance -----------------------------------------------------


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """|mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2)).

    The trace of the matrix square root is the sum of the square roots of the
    eigenvalues of C1 @ C2 (similar to a PSD matrix, so they are real and
    non-negative up to round-off; small negative eigenvalues are clipped).
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    diff = float(np.sum((mu1 - mu2) ** 2))
    eigs = np.linalg.eigvals(cov1 @ cov2)
    eigs = np.real(eigs)
    if eigs.min(initial=0.0) < -1e-8:
        logger.warning("covariance product has eigenvalue %g < 0; clipping", eigs.min())
    eigs = np.clip(eigs, 0.0, None)
    trace_sqrt = float(np.sum(np.sqrt(eigs)))
    return diff + float(np.trace(cov1) + np.trace(cov2)) - 2.0 * trace_sqrt


def fid_from_embeddings(e1: np.ndarray, e2: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two embedding sets (ddof 1)."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.ndim != 2 or e2.ndim != 2:
        raise ValueError("embeddings must be (N, D) arrays")
    if e1.shape[0] < 2 or e2.shape[0] < 2:
        raise ValueError("FID needs at least 2 images per corpus")
    mu1, mu2 = e1.mean(axis=0), e2.mean(axis=0)
    cov1 = np.cov(e1, rowvar=False)
    cov2 = np.cov(e2, rowvar=False)
    return frechet_distance(mu1, cov1, mu2, cov2)


# -- feature backends -----------------------------------------------------


class StubFeatureBackend(nn.Module):
    """Fixed seeded conv pyramid: deterministic, offline, untrained.

    Four stride-2 convolutions with ReLU; taps are the four activation maps and
    the embedding is the pooled last one (64-d). Only relative comparisons are
    meaningful, which is all the tests and smoke runs need.
    """

    name = "lightweight-stub"
    embedding_dim = 64

    def __init__(self):
        super().__init__()
        widths = [8, 16, 32, 64]
        gen = torch.Generator().manual_seed(_STUB_SEED)
        convs = []
        cin = 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            with torch.no_grad():
                std = math.sqrt(2.0 / (9 * cin))
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            convs.append(conv)
            cin = w
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @staticmethod
    def _to_rgb(x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 1:
            return x.expand(-1, 3, -1, -1)
        return x

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self._to_rgb(x)
        out = []
        with torch.no_grad():
            for conv in self.convs:
                h = F.relu(conv(h))
                out.append(h)
        return out

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.taps(x)[-1].mean(dim=(2, 3))


class InceptionLikeBackend(nn.Module):
    """Inception-v3 trunk loaded from a local state dict.

    Looks for the ``weights`` path, else ``inception.pt`` in the weights
    directory. Raises BackendUnavailable when no weights exist, so callers can
    degrade to a skipped-metrics report.
    """

    name = "inception-like"
    embedding_dim = 2048

    def __init__(self, weights: str = ""):
        super().__init__()
        from torchvision.models import inception_v3

        path = Path(weights) if weights else resolve_weights_dir() / "inception.pt"
        if not path.is_file():
            raise BackendUnavailable(
                f"no inception weights at {path}; run 'pix2next fetch-weights --backbone inception'"
            )
        model = inception_v3(weights=None, aux_logits=True, init_weights=False)
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        model.fc = nn.Identity()
        self.model = model
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _prepare(self, x: torch.Tensor) -> torch.Tensor:
        x = StubFeatureBackend._to_rgb(x)
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        mean = x.new_tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = x.new_tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        return (x - mean) / std

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        m = self.model
        h = self._prepare(x)
        out = []
        with torch.no_grad():
            h = m.Conv2d_2b_3x3(m.Conv2d_2a_3x3(m.Conv2d_1a_3x3(h)))
            out.append(h)
            h = m.Conv2d_4a_3x3(m.Conv2d_3b_1x1(m.maxpool1(h)))
            out.append(h)
            h = m.Mixed_5d(m.Mixed_5c(m.Mixed_5b(m.maxpool2(h))))
            out.append(h)
            h = m.Mixed_6e(m.Mixed_6d(m.Mixed_6c(m.Mixed_6b(m.Mixed_6a(h)))))
            out.append(h)
            h = m.Mixed_7c(m.Mixed_7b(m.Mixed_7a(h)))
            out.append(h)
        return out

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.taps(x)[-1].mean(dim=(2, 3))


def get_feature_backend(name: str | None, weights: str = ""):
    """Build a backend by name; None disables the feature-based metrics."""
    if name in (None, "", "none"):
        return None
    if name == "lightweight-stub":
        return StubFeatureBackend()
    if name == "inception-like":
        return InceptionLikeBackend(weights)
    raise ValueError(f"unknown feature backend {name!r}, expected one of {BACKEND_NAMES}")


# -- perceptual metrics ---------------------------------------------------


def lpips(gen: torch.Tensor, gt: torch.Tensor, backend) -> float:
    """Mean squared distance between channel-normalized activations.

    Each tap's features are unit-normalized along channels per position; the
    per-tap mean squared difference is averaged over taps. Zero at identity,
    and grows with perceptual discrepancy under the backend's features.
    """
    taps_a = backend.taps(gen)
    taps_b = backend.taps(gt)
    vals = []
    for a, b in zip(taps_a, taps_b):
        na = a / torch.sqrt((a * a).sum(dim=1, keepdim=True) + 1e-10)
        nb = b / torch.sqrt((b * b).sum(dim=1, keepdim=True) + 1e-10)
        vals.append(((na - nb) ** 2).mean())
    return float(torch.stack(vals).mean())


def dists(gen: torch.Tensor, gt: torch.Tensor, backend, c1: float = 1e-6, c2: float = 1e-6) -> float:
    """Structure/texture dissimilarity over backend features (input as tap 0).

    Per channel of each tap: a luminance-style term on the global means and a
    structure term on variances/covariance, averaged with equal weight. The
    result is 1 minus the mean similarity, zero at identity.
    """
    taps_a = [StubFeatureBackend._to_rgb(gen)] + backend.taps(gen)
    taps_b = [StubFeatureBackend._to_rgb(gt)] + backend.taps(gt)
    scores = []
    for a, b in zip(taps_a, taps_b):
        mu_a = a.mean(dim=(2, 3))
        mu_b = b.mean(dim=(2, 3))
        var_a = a.var(dim=(2, 3), unbiased=False)
        var_b = b.var(dim=(2, 3), unbiased=False)
        cov = ((a - mu_a[..., None, None]) * (b - mu_b[..., None, None])).mean(dim=(2, 3))
        texture = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
        structure = (2 * cov + c2) / (var_a + var_b + c2)
        scores.append((0.5 * texture + 0.5 * structure).mean())
    return float(1.0 - torch.stack(scores).mean())


# -- corpus evaluation ----------------------------------------------------


@dataclass
class MetricReport:
    per_image: list[dict]
    aggregates: dict
    fid: float | None
    backend: str | None
    skipped: list[str] = field(default_factory=list)
    directions: dict = field(default_factory=lambda: dict(DIRECTIONS))

    def to_csv(self, path: Path | str):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in self.per_image:
                writer.writerow(
                    [row["id"]] + [_csv_cell(row.get(k)) for k in CSV_HEADER[1:]]
                )

    def to_json(self, path: Path | str):
        payload = {
            "n_images": len(self.per_image),
            "backend": self.backend,
            "fid": self.fid,
            "skipped": self.skipped,
            "aggregates": self.aggregates,
            "directions": self.directions,
            "per_image": self.per_image,
        }
        Path(path).write_text(
            json.dumps(_json_safe(payload), indent=1), encoding="utf-8"
        )


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value) if isinstance(value, float) else value


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return None
    return obj


def _load_band(path: Path) -> np.ndarray:
    img = _open_decoded(path)
    band = _collapse_to_single_band(np.asarray(img), path)
    return band.astype(np.float64) / 255.0


def _stems(directory: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            files[p.stem] = p
    return files


def evaluate_pair(gen: np.ndarray, gt: np.ndarray, backend=None) -> dict:
    """All per-image metrics for one prediction/reference pair in [0, 1]."""
    out = {
        "psnr": psnr(gen, gt),
        "ssim": ssim(gen, gt),
        "rmse": rmse(gen, gt),
        "std": pixel_std(gen, gt),
        "lpips": None,
        "dists": None,
    }
    if backend is not None:
        a = torch.from_numpy(gen.astype(np.float32))[None, None]
        b = torch.from_numpy(gt.astype(np.float32))[None, None]
        out["lpips"] = lpips(a, b, backend)
        out["dists"] = dists(a, b, backend)
    return out


def evaluate_dirs(
    gen_dir: Path | str,
    gt_dir: Path | str,
    backend: str | None = "lightweight-stub",
    backend_weights: str = "",
) -> MetricReport:
    """Score a directory of predictions against ground truth by filename stem.

    Corpora must match exactly; unpaired files raise. Metrics whose backend is
    unavailable are listed in ``skipped`` and reported as null.
    """
    gen_files = _stems(Path(gen_dir))
    gt_files = _stems(Path(gt_dir))
    if not gen_files or not gt_files:
        raise ValueError(f"no images found in {gen_dir if not gen_files else gt_dir}")
    unpaired = sorted(set(gen_files) ^ set(gt_files))
    if unpaired:
        raise ValueError(f"corpora do not match; unpaired ids: {', '.join(unpaired[:20])}")

    skipped = []
    backend_name = backend if backend not in ("", "none") else None
    feature_backend = None
    if backend_name is not None:
        try:
            feature_backend = get_feature_backend(backend_name, backend_weights)
        except BackendUnavailable as exc:
            logger.warning("feature backend unavailable: %s", exc)
            skipped = ["lpips", "dists", "fid"]
    else:
        skipped = ["lpips", "dists", "fid"]

    rows = []
    gen_embeds, gt_embeds = [], []
    for stem in sorted(gen_files):
        g = _load_band(gen_files[stem])
        t = _load_band(gt_files[stem])
        _check_pair(g, t)
        row = {"id": stem}
        row.update(evaluate_pair(g, t, feature_backend))
        rows.append(row)
        if feature_backend is not None:
            a = torch.from_numpy(g.astype(np.float32))[None, None]
            b = torch.from_numpy(t.astype(np.float32))[None, None]
            gen_embeds.append(feature_backend.embed(a).numpy()[0])
            gt_embeds.append(feature_backend.embed(b).numpy()[0])

    fid_value = None
    if feature_backend is not None:
        if len(rows) >= 2:
            fid_value = fid_from_embeddings(np.stack(gen_embeds), np.stack(gt_embeds))
        else:
            skipped = sorted(set(skipped) | {"fid"})
            logger.warning("FID skipped: needs at least 2 images, got %d", len(rows))

    aggregates = {}
    for key in CSV_HEADER[1:]:
        values = [row[key] for row in rows]
        if any(v is None for v in values):
            aggregates[key] = None
            continue
        arr = np.asarray(values, dtype=np.float64)
        mean = float(arr.mean())
        std = float(arr.std()) if math.isfinite(mean) else float("nan")
        aggregates[key] = {"mean": mean, "std": std}

    return MetricReport(
        per_image=rows,
        aggregates=aggregates,
        fid=fid_value,
        backend=feature_backend.name if feature_backend is not None else None,
        skipped=skipped,
    )
