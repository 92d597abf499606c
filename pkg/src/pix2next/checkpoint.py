"""Checkpoint directories: a JSON manifest plus raw float32 parameter blobs.

Layout of one checkpoint directory::

    step-000123/
      manifest.json        step, epoch, seed, specs, blob layouts, optim meta
      generator.bin        all generator parameters, row-major float32,
                           concatenated in named_parameters order
      generator.optim.bin  Adam first/second moments, interleaved per parameter
      d0.bin, d0.optim.bin ... one pair per discriminator scale

The manifest records every parameter name and shape, so a blob can be audited
or reloaded without instantiating the model first. Writes go to a temporary
sibling directory and are renamed into place, so a killed run never leaves a
half-written checkpoint behind.
"""

from __future__ import annotations

import dataclasses
import json
import os
import shutil
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def _module_layout(module) -> list[dict]:
    return [{"name": n, "shape": list(p.shape)} for n, p in module.named_parameters()]


def _write_param_blob(module, path: Path):
    arrays = [p.detach().cpu().numpy().astype(np.float32).ravel() for _, p in module.named_parameters()]
    np.concatenate(arrays).tofile(path)


def _write_optim_blob(optimizer, module, path: Path) -> list[float]:
    """Serialize Adam moments in parameter order; returns the step counts.

    Parameters the optimizer has not touched yet get zero moments and a zero
    step count, so a checkpoint taken before the first update still loads.
    """
    chunks = []
    counts = []
    for _, p in module.named_parameters():
        state = optimizer.state.get(p, {})
        exp_avg = state.get("exp_avg")
        exp_avg_sq = state.get("exp_avg_sq")
        counts.append(float(state["step"]) if "step" in state else 0.0)
        for moment in (exp_avg, exp_avg_sq):
            if moment is None:
                chunks.append(np.zeros(p.numel(), dtype=np.float32))
            else:
                chunks.append(moment.detach().cpu().numpy().astype(np.float32).ravel())
    np.concatenate(chunks).tofile(path)
    return counts


def save_checkpoint(
    directory: Path | str,
    *,
    step: int,
    epoch: int,
    seed: int,
    resolution: tuple[int, int],
    modules: dict,
    specs: dict,
    optimizers: dict | None = None,
    losses: dict | None = None,
) -> Path:
    """Write one checkpoint atomically and return its final path.

    ``modules`` maps blob name -> nn.Module ("generator", "d0", ...);
    ``specs`` maps name -> dataclass spec or None; ``optimizers`` maps a subset
    of the module names to their Adam instances.
    """
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)

    optim_meta = {}
    for name, module in modules.items():
        _write_param_blob(module, tmp / f"{name}.bin")
        if optimizers and name in optimizers:
            counts = _write_optim_blob(optimizers[name], module, tmp / f"{name}.optim.bin")
            optim_meta[name] = {"step_counts": counts}

    manifest = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "epoch": epoch,
        "seed": seed,
        "resolution": list(resolution),
        "rng_state": {"kind": "derived", "seed": seed},
        "specs": {
            name: (dataclasses.asdict(spec) if spec is not None else None)
            for name, spec in specs.items()
        },
        "blobs": {name: _module_layout(module) for name, module in modules.items()},
        "optim": optim_meta,
        "losses": losses,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")

    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)
    return directory


def load_manifest(directory: Path | str) -> dict:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"not a checkpoint directory (no manifest.json): {directory}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    return manifest


def _read_blob(path: Path, expected: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"missing blob {path}")
    blob = np.fromfile(path, dtype=np.float32)
    if blob.size != expected:
        raise ValueError(f"{what}: blob {path.name} holds {blob.size} floats, manifest expects {expected}")
    return blob


def restore_module(directory: Path | str, name: str, module) -> None:
    """Copy a blob back into a live module, verifying names and shapes."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    layout = manifest["blobs"].get(name)
    if layout is None:
        raise ValueError(f"checkpoint has no blob named {name!r}")
    params = dict(module.named_parameters())
    recorded = [(e["name"], tuple(e["shape"])) for e in layout]
    live = [(n, tuple(p.shape)) for n, p in module.named_parameters()]
    if recorded != live:
        raise ValueError(f"parameter layout mismatch for {name!r}: checkpoint does not fit this module")
    total = sum(int(np.prod(s)) for _, s in recorded)
    blob = _read_blob(directory / f"{name}.bin", total, name)
    offset = 0
    with torch.no_grad():
        for pname, shape in recorded:
            n = int(np.prod(shape))
            chunk = blob[offset : offset + n].reshape(shape)
            params[pname].copy_(torch.from_numpy(chunk.copy()))
            offset += n


def restore_optimizer(directory: Path | str, name: str, optimizer, module) -> None:
    """Rebuild Adam moments for a module whose parameters are already restored."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    meta = manifest["optim"].get(name)
    if meta is None:
        raise ValueError(f"checkpoint has no optimizer state for {name!r}")
    counts = meta["step_counts"]
    named = list(module.named_parameters())
    total = 2 * sum(p.numel() for _, p in named)
    blob = _read_blob(directory / f"{name}.optim.bin", total, f"{name} optimizer")
    offset = 0
    for (pname, p), count in zip(named, counts):
        n = p.numel()
        exp_avg = blob[offset : offset + n].reshape(p.shape).copy()
        exp_avg_sq = blob[offset + n : offset + 2 * n].reshape(p.shape).copy()
        offset += 2 * n
        if count == 0.0:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(count),
            "exp_avg": torch.from_numpy(exp_avg),
            "exp_avg_sq": torch.from_numpy(exp_avg_sq),
        }


def latest_checkpoint(checkpoints_dir: Path | str) -> Path | None:
    """The highest-step ``step-*`` checkpoint under a run's checkpoints dir."""
    checkpoints_dir = Path(checkpoints_dir)
    if not checkpoints_dir.is_dir():
        return None
    best = None
    best_step = -1
    for child in checkpoints_dir.iterdir():
        if child.is_dir() and child.name.startswith("step-") and (child / "manifest.json").is_file():
            try:
                step = int(child.name.split("-", 1)[1])
            except ValueError:
                continue
            if step > best_step:
                best, best_step = child, step
    return best
