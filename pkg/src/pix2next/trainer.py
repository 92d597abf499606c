"""Training loop, learning-rate schedule, checkpoint/resume, and inference.

One training step: extract frozen backbone features once, run the generator
once, update each scale's discriminator on the detached prediction with its own
Adam optimizer (full scale first, coarsest last), then update the generator on
the combined adversarial + feature-matching + SSIM objective scored against the
freshly updated discriminators.

Everything stochastic is a pure function of the config seed: parameter init,
batch order per epoch, and the optional flip augmentation. Two runs from the
same config produce identical logs, and a killed run resumed from its last
checkpoint continues exactly as the uninterrupted run would have.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt
from .data import BatchSpec, DatasetManifest, ImagePair, iter_batches
from .discriminator import (
    DiscriminatorSpec,
    build_discriminators,
    multiscale_pyramid,
    score,
)
from .extractor import ExtractorSpec, build_extractor
from .generator import GeneratorSpec, build_generator
from .losses import (
    LossWeights,
    SSIMParams,
    feature_matching_loss,
    gan_loss,
    ssim_loss,
    total_generator_loss,
)

logger = logging.getLogger(__name__)

LOG_NAME = "log.jsonl"


class TrainingDiverged(RuntimeError):
    """A loss component went non-finite; the message names the last checkpoint."""


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``base`` followed by cosine decay to ``base * min_frac``."""

    base: float
    warmup_steps: int
    total_steps: int
    min_frac: float = 0.01

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("base learning rate must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 <= warmup ({self.warmup_steps}) <= total ({self.total_steps})")
        if not 0 <= self.min_frac <= 1:
            raise ValueError(f"min_frac must be in [0, 1], got {self.min_frac}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at an integer step in [0, total].

    Exactly 0 at step 0 (with warmup), exactly ``base`` at the end of warmup,
    and ``base * min_frac`` at the final step.
    """
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.warmup_steps > 0 and step <= schedule.warmup_steps:
        return schedule.base * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.base * schedule.min_frac
    progress = (step - schedule.warmup_steps) / span
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return schedule.base * (schedule.min_frac + (1.0 - schedule.min_frac) * cosine)


@dataclass
class TrainConfig:
    out_dir: Path
    seed: int = 0
    batch_size: int = 1
    epochs: int = 0  # either epochs or max_steps must be set
    max_steps: int = 0
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.01
    betas: tuple[float, float] = (0.5, 0.999)
    resize: tuple[int, int] = (256, 256)
    checkpoint_interval: int = 0  # 0: only the final checkpoint
    augment_flips: bool = False
    gan_form: str = "bce"
    weights: LossWeights = field(default_factory=LossWeights)
    ssim: SSIMParams = field(default_factory=SSIMParams)
    device: str = "cpu"

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.epochs <= 0 and self.max_steps <= 0:
            raise ValueError("set epochs or max_steps to a positive value")


def batch_to_tensors(pairs: list[ImagePair], flip_mask=None, device="cpu"):
    """Stack pairs into (B, 3, H, W) and (B, 1, H, W) float32 tensors."""
    rgbs, targets = [], []
    for i, pair in enumerate(pairs):
        rgb, target = pair.rgb, pair.target
        if flip_mask is not None and flip_mask[i]:
            rgb = rgb[:, ::-1].copy()
            target = target[:, ::-1].copy()
        rgbs.append(rgb)
        targets.append(target)
    x = torch.from_numpy(np.stack(rgbs)).permute(0, 3, 1, 2).contiguous().to(device)
    y = torch.from_numpy(np.stack(targets)).permute(0, 3, 1, 2).contiguous().to(device)
    return x, y


class Trainer:
    """Owns the models, the four optimizers, and the step counter."""

    def __init__(
        self,
        config: TrainConfig,
        manifest: DatasetManifest,
        gen_spec: GeneratorSpec | None = None,
        disc_spec: DiscriminatorSpec | None = None,
        extractor_spec: ExtractorSpec | None = None,
    ):
        self.config = config
        self.manifest = manifest
        self.extractor_spec = extractor_spec
        self.extractor = build_extractor(extractor_spec)
        if gen_spec is None:
            gen_spec = GeneratorSpec()
        if self.extractor is not None and gen_spec.feature_dim != self.extractor.feature_dim:
            gen_spec = GeneratorSpec(
                **{**gen_spec.__dict__, "feature_dim": self.extractor.feature_dim}
            )
        if self.extractor is None and gen_spec.extractor_enabled:
            gen_spec = GeneratorSpec(**{**gen_spec.__dict__, "extractor_enabled": False})
        self.gen_spec = gen_spec
        self.disc_spec = disc_spec or DiscriminatorSpec()
        # The coarsest pyramid level must keep at least 2 spatial pixels through
        # every normalized discriminator layer.
        coarsest = min(config.resize) // 2 ** (self.disc_spec.num_scales - 1)
        if coarsest < 2 ** (self.disc_spec.layers + 1):
            raise ValueError(
                f"resolution {config.resize} is too small for {self.disc_spec.num_scales} "
                f"discriminator scales of {self.disc_spec.layers} layers; reduce "
                f"discriminator.layers or num_scales, or raise the resolution"
            )

        self.generator = build_generator(self.gen_spec, config.seed).to(config.device)
        self.bank = build_discriminators(self.disc_spec, config.seed + 1).to(config.device)

        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.lr_g, betas=config.betas)
        self.opt_d = [
            torch.optim.Adam(d.parameters(), lr=config.lr_d, betas=config.betas) for d in self.bank
        ]

        n_train = len(manifest.split_entries("train"))
        self.steps_per_epoch = max(1, math.ceil(n_train / config.batch_size))
        if config.max_steps > 0:
            self.total_steps = config.max_steps
        else:
            self.total_steps = config.epochs * self.steps_per_epoch
        warmup = int(round(config.warmup_frac * self.total_steps))
        self.sched_g = LrSchedule(config.lr_g, warmup, self.total_steps, config.min_lr_frac)
        self.sched_d = LrSchedule(config.lr_d, warmup, self.total_steps, config.min_lr_frac)

        self.step = 0  # number of completed steps
        self.last_breakdown = None
        self.last_checkpoint: Path | None = None
        self._cache: dict = {}

    # -- single update ----------------------------------------------------

    def train_step(self, x: torch.Tensor, y: torch.Tensor):
        """One full update (all discriminators, then the generator)."""
        cfg = self.config
        t = self.step + 1
        lr_g = lr_at(self.sched_g, min(t, self.sched_g.total_steps))
        lr_d = lr_at(self.sched_d, min(t, self.sched_d.total_steps))
        for group in self.opt_g.param_groups:
            group["lr"] = lr_g
        for opt in self.opt_d:
            for group in opt.param_groups:
                group["lr"] = lr_d

        features = self.extractor.extract(x) if self.extractor is not None else None
        y_hat = self.generator(x, features)

        n_scales = self.disc_spec.num_scales
        real_pyr = multiscale_pyramid(y, n_scales)
        fake_pyr = multiscale_pyramid(y_hat, n_scales)
        if self.disc_spec.conditioning == "rgb-concat":
            cond_pyr = multiscale_pyramid(x, n_scales)
        else:
            cond_pyr = [None] * n_scales

        for k, (d, opt) in enumerate(zip(self.bank, self.opt_d)):
            real_scores, _ = score(d, real_pyr[k], cond_pyr[k])
            fake_scores, _ = score(d, fake_pyr[k].detach(), cond_pyr[k])
            d_loss = gan_loss(real_scores, fake_scores, "discriminator", cfg.gan_form)
            if not torch.isfinite(d_loss):
                raise TrainingDiverged(
                    f"non-finite discriminator loss at scale {k}; "
                    f"last good checkpoint: {self.last_checkpoint}"
                )
            opt.zero_grad(set_to_none=True)
            d_loss.backward()
            opt.step()

        gan_terms, real_feats, fake_feats = [], [], []
        for k, d in enumerate(self.bank):
            with torch.no_grad():
                _, rf = score(d, real_pyr[k], cond_pyr[k])
            fake_scores, ff = score(d, fake_pyr[k], cond_pyr[k])
            gan_terms.append(gan_loss(None, fake_scores, "generator", cfg.gan_form))
            real_feats.append(rf)
            fake_feats.append(ff)
        fm = feature_matching_loss(real_feats, fake_feats)
        sl = ssim_loss(y_hat, y, cfg.ssim)
        try:
            total, breakdown = total_generator_loss(gan_terms, fm, sl, cfg.weights)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"{exc}; last good checkpoint: {self.last_checkpoint}") from exc
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        self.step = t
        self.last_breakdown = breakdown
        self._last_lrs = (lr_g, lr_d)
        return breakdown

    def _flip_mask(self, batch_len: int):
        if not self.config.augment_flips:
            return None
        rng = np.random.default_rng([self.config.seed, 7919, self.step])
        return rng.random(batch_len) < 0.5

    # -- persistence ------------------------------------------------------

    def _module_map(self):
        modules = {"generator": self.generator}
        for k, d in enumerate(self.bank):
            modules[f"d{k}"] = d
        return modules

    def _optimizer_map(self):
        optims = {"generator": self.opt_g}
        for k, opt in enumerate(self.opt_d):
            optims[f"d{k}"] = opt
        return optims

    def save_checkpoint(self, directory: Path | str | None = None) -> Path:
        if directory is None:
            directory = self.config.out_dir / "checkpoints" / f"step-{self.step:06d}"
        losses = None
        if self.last_breakdown is not None:
            b = self.last_breakdown
            losses = {"L_GAN": b.gan, "L_FM": b.fm, "L_SSIM": b.ssim, "L_total": b.total}
        path = ckpt.save_checkpoint(
            directory,
            step=self.step,
            epoch=self.step // self.steps_per_epoch,
            seed=self.config.seed,
            resolution=self.config.resize,
            modules=self._module_map(),
            specs={
                "generator": self.gen_spec,
                "discriminator": self.disc_spec,
                "extractor": self.extractor_spec,
            },
            optimizers=self._optimizer_map(),
            losses=losses,
        )
        self.last_checkpoint = path
        return path

    def resume_from(self, directory: Path | str):
        """Restore parameters, optimizer moments, and the step counter."""
        import dataclasses

        manifest = ckpt.load_manifest(directory)
        recorded = manifest["specs"]["generator"]
        if recorded != dataclasses.asdict(self.gen_spec):
            raise ValueError("checkpoint generator spec does not match this run's config")
        for name, module in self._module_map().items():
            ckpt.restore_module(directory, name, module)
        for name, opt in self._optimizer_map().items():
            ckpt.restore_optimizer(directory, name, opt, self._module_map()[name])
        self.step = int(manifest["step"])
        self.last_checkpoint = Path(directory)

    # -- full loop --------------------------------------------------------

    def _log_path(self) -> Path:
        return self.config.out_dir / LOG_NAME

    def _truncate_log(self):
        """Drop log lines past the restored step so the log stays gap-free."""
        path = self._log_path()
        if not path.is_file():
            return
        kept = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            if json.loads(line)["step"] <= self.step:
                kept.append(line)
        path.write_text("".join(l + "\n" for l in kept), encoding="utf-8")

    def fit(self):
        """Run to ``total_steps``, logging one JSON line per step."""
        cfg = self.config
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        self._truncate_log()
        batch_spec = BatchSpec(batch_size=cfg.batch_size, seed=cfg.seed, resize=cfg.resize)
        log_file = open(self._log_path(), "a", encoding="utf-8")
        start = time.monotonic()
        try:
            while self.step < self.total_steps:
                epoch = self.step // self.steps_per_epoch
                done_in_epoch = self.step % self.steps_per_epoch
                for i, batch in enumerate(
                    iter_batches(self.manifest, batch_spec, "train", epoch, self._cache)
                ):
                    if i < done_in_epoch:
                        continue
                    x, y = batch_to_tensors(batch, self._flip_mask(len(batch)), cfg.device)
                    breakdown = self.train_step(x, y)
                    lr_g, lr_d = self._last_lrs
                    log_file.write(
                        json.dumps(
                            {
                                "step": self.step,
                                "L_GAN": breakdown.gan,
                                "L_FM": breakdown.fm,
                                "L_SSIM": breakdown.ssim,
                                "L_total": breakdown.total,
                                "lr_G": lr_g,
                                "lr_D": lr_d,
                            }
                        )
                        + "\n"
                    )
                    log_file.flush()
                    if (
                        cfg.checkpoint_interval > 0
                        and self.step % cfg.checkpoint_interval == 0
                        and self.step < self.total_steps
                    ):
                        self.save_checkpoint()
                    if self.step >= self.total_steps:
                        break
            final = self.save_checkpoint()
            logger.info(
                "training finished: %d steps in %.1fs, final checkpoint %s",
                self.step, time.monotonic() - start, final,
            )
            return final
        finally:
            log_file.close()


def fit(
    config: TrainConfig,
    manifest: DatasetManifest,
    gen_spec: GeneratorSpec | None = None,
    disc_spec: DiscriminatorSpec | None = None,
    extractor_spec: ExtractorSpec | None = None,
    resume_from: Path | str | None = None,
) -> Trainer:
    """Build a Trainer, optionally resume, run to completion, return it."""
    trainer = Trainer(config, manifest, gen_spec, disc_spec, extractor_spec)
    if resume_from is not None:
        trainer.resume_from(resume_from)
    trainer.fit()
    return trainer


# -- inference ------------------------------------------------------------


def _spec_from_dict(cls, data):
    return None if data is None else cls(**data)


def load_generator_for_inference(checkpoint_dir: Path | str):
    """Rebuild the generator and extractor recorded in a checkpoint."""
    manifest = ckpt.load_manifest(checkpoint_dir)
    gen_spec = GeneratorSpec(**manifest["specs"]["generator"])
    extractor_spec = _spec_from_dict(ExtractorSpec, manifest["specs"]["extractor"])
    generator = build_generator(gen_spec, manifest["seed"])
    ckpt.restore_module(checkpoint_dir, "generator", generator)
    generator.eval()
    extractor = build_extractor(extractor_spec)
    resolution = tuple(manifest["resolution"])
    return generator, extractor, resolution


def _gather_inputs(inputs) -> list[Path]:
    from .data import IMAGE_EXTENSIONS

    paths = []
    for item in inputs if isinstance(inputs, (list, tuple)) else [inputs]:
        p = Path(item)
        if p.is_dir():
            paths.extend(
                child for child in sorted(p.iterdir()) if child.suffix.lower() in IMAGE_EXTENSIONS
            )
        else:
            paths.append(p)
    return paths


def translate(checkpoint_dir: Path | str, inputs, out_dir: Path | str):
    """Run inference over files or directories of RGB images.

    Writes one 8-bit grayscale PNG per input, named by the input's stem.
    Returns (written paths, failures) where failures is a list of
    (input path, reason) pairs; the caller decides how to report them.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    generator, extractor, (h, w) = load_generator_for_inference(checkpoint_dir)
    written, failures = [], []
    for path in _gather_inputs(inputs):
        try:
            with Image.open(path) as img:
                rgb = img.convert("RGB").resize((w, h), Image.Resampling.BILINEAR)
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
            x = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
            with torch.no_grad():
                features = extractor.extract(x) if extractor is not None else None
                y = generator(x, features)
            band = np.round(y[0, 0].numpy() * 255.0).astype(np.uint8)
            target = out_dir / f"{path.stem}.png"
            Image.fromarray(band, mode="L").save(target)
            written.append(target)
        except Exception as exc:  # keep going; report at the end
            failures.append((path, str(exc)))
    return written, failures
