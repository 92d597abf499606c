"""Paired spectral dataset ingestion, deterministic batching, and synthetic data.

Datasets pair an RGB image with a co-registered single-band target (NIR or
LWIR).  Two on-disk layouts are supported:

* ``paired-subdirs``: ``<root>/rgb/`` and ``<root>/nir/`` (or ``<root>/lwir/``)
  hold images matched by filename stem.  An optional ``<root>/split.txt``
  assigns ids to train/test (lines of ``<id> train`` or ``<id> test``; unlisted
  ids default to train) and an optional ``<root>/exclude.txt`` removes ids.
* ``file-list``: a UTF-8 manifest file with one
  ``rgb_path<TAB>target_path<TAB>id`` per line, paths relative to the manifest.

All pixel data is handed out as float32 in [0, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
TARGET_SUBDIRS = ("nir", "lwir")

# Luminance-style weights used for the synthetic target. The channel order is
# rotated relative to the usual RGB luminance so the mapping is not something a
# plain grayscale conversion reproduces.
_SYNTH_WEIGHTS = (0.114, 0.299, 0.587)  # applied to (r, g, b) respectively


@dataclass(frozen=True)
class ImagePair:
    """One co-registered sample: RGB input and single-band target in [0, 1]."""

    id: str
    rgb: np.ndarray  # (H, W, 3) float32
    target: np.ndarray  # (H, W, 1) float32
    split: str = "train"


@dataclass(frozen=True)
class ManifestEntry:
    rgb_path: Path
    target_path: Path
    id: str
    split: str = "train"


@dataclass
class DatasetManifest:
    """Resolved description of a paired dataset on disk."""

    root: Path
    entries: list[ManifestEntry]
    modality: str  # "NIR" | "LWIR"
    resolution: tuple[int, int]  # declared (height, width) of the source pairs

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in ("train", "test"):
            raise ValueError(f"unknown split {split!r}, expected 'train' or 'test'")
        return [e for e in self.entries if e.split == split]

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class BatchSpec:
    """Batching parameters. ``resize`` is (height, width), each divisible by 8."""

    batch_size: int
    seed: int
    resize: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        h, w = self.resize
        if h % 8 != 0 or w % 8 != 0:
            raise ValueError(f"resize dimensions must be divisible by 8, got {self.resize}")


def _list_images(directory: Path) -> dict[str, Path]:
    """Map filename stem -> path for every image file in ``directory``."""
    found: dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        if path.stem in found:
            raise ValueError(f"duplicate id {path.stem!r} in {directory}: {found[path.stem].name} and {path.name}")
        found[path.stem] = path
    return found


def _read_id_file(path: Path) -> list[list[str]]:
    lines = []
    for raw in path.read_text(encoding="utf-8").splitlines():
        stripped = raw.strip()
        if stripped:
            lines.append(stripped.split())
    return lines


def _declared_resolution(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        w, h = img.size
    return (h, w)


def _load_paired_subdirs(root: Path) -> tuple[list[ManifestEntry], str]:
    rgb_dir = root / "rgb"
    if not rgb_dir.is_dir():
        raise FileNotFoundError(f"missing rgb/ directory under {root}")
    target_dir = None
    modality = ""
    for name in TARGET_SUBDIRS:
        if (root / name).is_dir():
            target_dir = root / name
            modality = name.upper()
            break
    if target_dir is None:
        raise FileNotFoundError(f"no target directory ({' or '.join(TARGET_SUBDIRS)}) under {root}")

    rgb_files = _list_images(rgb_dir)
    target_files = _list_images(target_dir)
    matched = sorted(set(rgb_files) & set(target_files))
    unmatched = sorted(set(rgb_files) ^ set(target_files))
    if unmatched:
        logger.warning(
            "%d file(s) without a counterpart were skipped: %s",
            len(unmatched),
            ", ".join(unmatched[:20]) + ("..." if len(unmatched) > 20 else ""),
        )
    if not matched:
        raise ValueError(f"no matched rgb/target pairs under {root} ({len(unmatched)} unmatched file(s))")

    splits = {}
    split_file = root / "split.txt"
    if split_file.is_file():
        for fields in _read_id_file(split_file):
            if len(fields) != 2 or fields[1] not in ("train", "test"):
                raise ValueError(f"malformed line in {split_file}: {' '.join(fields)!r}")
            splits[fields[0]] = fields[1]

    excluded = set()
    exclude_file = root / "exclude.txt"
    if exclude_file.is_file():
        for fields in _read_id_file(exclude_file):
            excluded.add(fields[0])

    entries = [
        ManifestEntry(rgb_files[i], target_files[i], i, splits.get(i, "train"))
        for i in matched
        if i not in excluded
    ]
    if not entries:
        raise ValueError(f"all matched pairs under {root} are excluded")
    return entries, modality


def _load_file_list(root: Path) -> tuple[list[ManifestEntry], str]:
    manifest_path = root / "manifest.txt" if root.is_dir() else root
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest file not found: {manifest_path}")
    base = manifest_path.parent
    entries = []
    seen = set()
    modality = "NIR"
    for lineno, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{manifest_path}:{lineno}: expected rgb_path<TAB>target_path<TAB>id")
        rgb_path = (base / fields[0]).resolve()
        target_path = (base / fields[1]).resolve()
        pair_id = fields[2].strip()
        for p in (rgb_path, target_path):
            if not p.is_file():
                raise FileNotFoundError(f"{manifest_path}:{lineno}: listed file does not exist: {p}")
        if pair_id in seen:
            raise ValueError(f"{manifest_path}:{lineno}: duplicate id {pair_id!r}")
        seen.add(pair_id)
        if "lwir" in target_path.parent.name.lower():
            modality = "LWIR"
        entries.append(ManifestEntry(rgb_path, target_path, pair_id))
    if not entries:
        raise ValueError(f"{manifest_path} lists no pairs")
    return entries, modality


def load_manifest(root: Path | str, layout: str = "paired-subdirs") -> DatasetManifest:
    """Scan a dataset root and return its manifest.

    Unmatched files are reported through the module logger, never silently
    dropped. Raises ``FileNotFoundError`` for missing directories or listed
    files, ``ValueError`` for duplicate ids, malformed lines, or an empty
    intersection.
    """
    root = Path(root)
    if layout == "paired-subdirs" and not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    if layout == "paired-subdirs":
        entries, modality = _load_paired_subdirs(root)
    elif layout == "file-list":
        entries, modality = _load_file_list(root)
    else:
        raise ValueError(f"unknown layout {layout!r}, expected 'paired-subdirs' or 'file-list'")
    resolution = _declared_resolution(entries[0].rgb_path)
    return DatasetManifest(root=root, entries=entries, modality=modality, resolution=resolution)


def _collapse_to_single_band(arr: np.ndarray, path: Path) -> np.ndarray:
    """Reduce a decoded target image to one channel (uint8 2-D or float 2-D)."""
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        rgb = arr[..., :3]
        spread = rgb.astype(np.int16).max(axis=2) - rgb.astype(np.int16).min(axis=2)
        if int(spread.max()) <= 1:
            return rgb[..., 0]
        logger.warning("target %s has unequal channels; averaging them", path)
        return rgb.astype(np.float64).mean(axis=2)
    raise ValueError(f"unsupported target image shape {arr.shape} in {path}")


def _open_decoded(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if img.mode == "P":
        img = img.convert("RGB")
    return img


def load_pair(entry: ManifestEntry, resize_to: tuple[int, int] = (256, 256)) -> ImagePair:
    """Load, resize (bilinear, anti-aliased), and scale one pair to [0, 1].

    The RGB image is emitted as 3 channels even if stored grayscale. A target
    stored as 3 equal channels keeps channel 0; unequal channels are averaged
    with a warning. Pairs whose source resolutions disagree raise ``ValueError``.
    """
    h, w = resize_to
    rgb_img = _open_decoded(entry.rgb_path).convert("RGB")
    target_img = _open_decoded(entry.target_path)
    if target_img.size != rgb_img.size:
        raise ValueError(
            f"pair {entry.id!r}: rgb is {rgb_img.size[::-1]} but target is {target_img.size[::-1]}"
        )
    rgb_img = rgb_img.resize((w, h), Image.Resampling.BILINEAR)
    rgb = np.asarray(rgb_img, dtype=np.float32) / 255.0

    band = _collapse_to_single_band(np.asarray(target_img), entry.target_path)
    if band.dtype == np.uint8:
        band_img = Image.fromarray(band, mode="L")
    else:
        band_img = Image.fromarray(band.astype(np.float32), mode="F")
    band_img = band_img.resize((w, h), Image.Resampling.BILINEAR)
    target = np.asarray(band_img, dtype=np.float32)[..., None] / 255.0
    return ImagePair(id=entry.id, rgb=rgb, target=target, split=entry.split)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Order of sample indices for one epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_batches(
    manifest: DatasetManifest,
    spec: BatchSpec,
    split: str = "train",
    epoch: int = 0,
    cache: dict | None = None,
):
    """Yield lists of ImagePair covering the split exactly once, shuffled.

    The permutation depends only on (spec.seed, epoch). The final batch may be
    short. Pass a dict as ``cache`` to reuse decoded pairs across epochs.
    """
    entries = manifest.split_entries(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    if spec.batch_size > len(entries):
        logger.warning("batch_size %d exceeds split size %d", spec.batch_size, len(entries))
    order = epoch_permutation(len(entries), spec.seed, epoch)
    for start in range(0, len(entries), spec.batch_size):
        batch = []
        for idx in order[start : start + spec.batch_size]:
            entry = entries[int(idx)]
            key = (entry.id, spec.resize)
            if cache is not None and key in cache:
                batch.append(cache[key])
                continue
            pair = load_pair(entry, resize_to=spec.resize)
            if cache is not None:
                cache[key] = pair
            batch.append(pair)
        yield batch


def synthetic_target(rgb: np.ndarray) -> np.ndarray:
    """Deterministic pseudo-NIR band for a synthetic RGB image in [0, 1].

    A fixed convex combination of the channels with rotated luminance-style
    weights, so the mapping is learnable but distinct from ordinary grayscale.
    Returns (H, W, 1) float matching the input dtype promotion.
    """
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    wr, wg, wb = _SYNTH_WEIGHTS
    return (wr * r + wg * g + wb * b)[..., None]


def _smooth_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Sum of a few low-frequency cosine modes, rescaled to [0.1, 0.9]."""
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    field = np.zeros((height, width))
    for _ in range(3):
        fy = rng.integers(1, 4) / height
        fx = rng.integers(1, 4) / width
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-9:
        return np.full_like(field, 0.5)
    return 0.1 + 0.8 * (field - lo) / (hi - lo)


def make_synthetic_dataset(
    n: int,
    seed: int,
    out_dir: Path | str,
    resolution: tuple[int, int] = (256, 256),
) -> DatasetManifest:
    """Materialize ``n`` synthetic pairs under ``out_dir`` and load the manifest.

    Images are smooth random fields; the target band is ``synthetic_target`` of
    the RGB image. Writes are deterministic: the same (n, seed, resolution)
    produce byte-identical files.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out_dir = Path(out_dir)
    height, width = resolution
    rgb_dir = out_dir / "rgb"
    nir_dir = out_dir / "nir"
    rgb_dir.mkdir(parents=True, exist_ok=True)
    nir_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        channels = [_smooth_field(rng, height, width) for _ in range(3)]
        rgb = np.stack(channels, axis=2)
        rgb_u8 = np.round(rgb * 255.0).astype(np.uint8)
        target = synthetic_target(rgb_u8.astype(np.float64) / 255.0)
        target_u8 = np.round(target[..., 0] * 255.0).astype(np.uint8)
        name = f"synth_{i:04d}.png"
        Image.fromarray(rgb_u8, mode="RGB").save(rgb_dir / name)
        Image.fromarray(target_u8, mode="L").save(nir_dir / name)
    return load_manifest(out_dir, layout="paired-subdirs")
