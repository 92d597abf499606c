"""TOML run configuration: defaults, validation, overrides, and assembly.

A config file is a set of flat tables ([data], [extractor], [generator],
[discriminator], [loss], [train]); every key has a default, unknown keys are
rejected by name, and dotted command-line overrides (``train.seed=3``) patch
the merged result. ``to_specs`` turns a validated config into the dataclasses
the rest of the package consumes, and ``dump_toml`` writes the fully-resolved
form back out so a run directory always records exactly what it ran with.
"""

from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .discriminator import DiscriminatorSpec
from .extractor import ExtractorSpec, build_extractor
from .generator import GeneratorSpec
from .losses import LossWeights, SSIMParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    """A config file or override that fails validation; message names the key."""


DEFAULTS = {
    "data": {
        "root": "",
        "layout": "paired-subdirs",
        "resize": [256, 256],
        "augment_flips": False,
    },
    "extractor": {
        "backbone": "identity-stub",
        "weights": "",
        "frozen": True,
    },
    "generator": {
        "base_width": 128,
        "attention": "EBD",
        "attn_dim": 128,
        "attn_heads": 4,
        "norm_groups": 32,
        "out_channels": 1,
    },
    "discriminator": {
        "num_scales": 3,
        "layers": 4,
        "base_width": 64,
        "conditioning": "unconditional",
    },
    "loss": {
        "lambda_fm": 10.0,
        "lambda_ssim": 10.0,
        "gan_form": "bce",
        "ssim_window": 11,
        "ssim_sigma": 1.5,
    },
    "train": {
        "out_dir": "runs/default",
        "seed": 0,
        "batch_size": 1,
        "epochs": 0,
        "max_steps": 0,
        "lr_g": 1e-4,
        "lr_d": 1e-4,
        "warmup_frac": 0.05,
        "min_lr_frac": 0.01,
        "beta1": 0.5,
        "beta2": 0.999,
        "checkpoint_interval": 0,
        "device": "cpu",
    },
}


def default_config() -> dict:
    return {section: dict(table) for section, table in DEFAULTS.items()}


def _check_value(section: str, key: str, value, default):
    dotted = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted} must be a boolean, got {value!r}")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{dotted} must be a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{dotted} must be an array, got {value!r}")
    return value


def merge_config(user: dict) -> dict:
    """Layer a parsed TOML document over the defaults, rejecting unknown keys."""
    cfg = default_config()
    for section, table in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in table.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            cfg[section][key] = _check_value(section, key, value, DEFAULTS[section][key])
    return cfg


def load_config(path: Path | str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return merge_config(user)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Patch ``section.key=value`` pairs; values parse as TOML literals."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} is not of the form section.key")
        section, key = parts
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        try:
            value = tomllib.loads(f"v = {raw.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw.strip()
        cfg[section][key] = _check_value(section, key, value, DEFAULTS[section][key])
    return cfg


def _fmt_toml(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt_toml(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def dump_toml(cfg: dict) -> str:
    lines = []
    for section, table in cfg.items():
        lines.append(f"[{section}]")
        for key, value in table.items():
            lines.append(f"{key} = {_fmt_toml(value)}")
        lines.append("")
    return "\n".join(lines)


def to_specs(cfg: dict, out_dir: Path | str | None = None, seed: int | None = None):
    """Build the runtime objects a validated config describes.

    Returns (train_config, gen_spec, disc_spec, extractor_spec). The extractor
    spec may be None (backbone "none"); the generator spec's feature size and
    enabled flag follow the chosen backbone.
    """
    ex = cfg["extractor"]
    extractor_spec = None
    if ex["backbone"] != "none":
        extractor_spec = ExtractorSpec(
            backbone=ex["backbone"], weights=ex["weights"], frozen=ex["frozen"]
        )

    g = cfg["generator"]
    feature_dim = 64
    if extractor_spec is not None and extractor_spec.backbone == "identity-stub":
        feature_dim = 64
    elif extractor_spec is not None:
        # Sizing the projections needs the backbone; internimage probes its file.
        feature_dim = build_extractor(extractor_spec).feature_dim
    gen_spec = GeneratorSpec(
        base_width=g["base_width"],
        attention=g["attention"],
        attn_dim=g["attn_dim"],
        attn_heads=g["attn_heads"],
        norm_groups=g["norm_groups"],
        out_channels=g["out_channels"],
        feature_dim=feature_dim,
        extractor_enabled=extractor_spec is not None,
    )

    d = cfg["discriminator"]
    disc_spec = DiscriminatorSpec(
        num_scales=d["num_scales"],
        layers=d["layers"],
        base_width=d["base_width"],
        conditioning=d["conditioning"],
    )

    t = cfg["train"]
    lo = cfg["loss"]
    resize = cfg["data"]["resize"]
    if len(resize) != 2:
        raise ConfigError(f"data.resize must be [height, width], got {resize!r}")
    train_config = TrainConfig(
        out_dir=Path(out_dir if out_dir is not None else t["out_dir"]),
        seed=seed if seed is not None else t["seed"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        max_steps=t["max_steps"],
        lr_g=t["lr_g"],
        lr_d=t["lr_d"],
        warmup_frac=t["warmup_frac"],
        min_lr_frac=t["min_lr_frac"],
        betas=(t["beta1"], t["beta2"]),
        resize=(resize[0], resize[1]),
        checkpoint_interval=t["checkpoint_interval"],
        augment_flips=cfg["data"]["augment_flips"],
        gan_form=lo["gan_form"],
        weights=LossWeights(lambda_fm=lo["lambda_fm"], lambda_ssim=lo["lambda_ssim"]),
        ssim=SSIMParams(window_size=lo["ssim_window"], sigma=lo["ssim_sigma"]),
        device=t["device"],
    )
    return train_config, gen_spec, disc_spec, extractor_spec
