"""Command-line entry points.

    pix2next synth          write a synthetic paired dataset
    pix2next train          train from a TOML config (resumable)
    pix2next translate      run a checkpoint over RGB images
    pix2next evaluate       score predictions against ground truth
    pix2next fetch-weights  download backbone weights (the only network step)

Exit codes: 0 success, 1 runtime failure, 2 invalid arguments or config.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, apply_overrides, dump_toml, load_config, to_specs
from .data import load_manifest, make_synthetic_dataset

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pix2next", description="RGB to NIR/LWIR image translation"
    )
    parser.add_argument("--version", action="version", version=f"pix2next {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True, type=Path, help="dataset root to create")
    p.add_argument("--n", type=int, default=8, help="number of pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=2, default=[256, 256], metavar=("H", "W"))

    p = sub.add_parser("train", help="train from a TOML config")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", type=Path, default=None, help="override train.out_dir")
    p.add_argument(
        "--resume",
        nargs="?",
        const="latest",
        default=None,
        metavar="CHECKPOINT",
        help="resume from a checkpoint dir (default: latest in the run dir)",
    )

    p = sub.add_parser("translate", help="run a checkpoint over RGB images")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument(
        "--input", required=True, type=Path, action="append", help="image file or directory (repeatable)"
    )
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--gen", required=True, type=Path, help="directory of predictions")
    p.add_argument("--gt", required=True, type=Path, help="directory of references")
    p.add_argument("--out", required=True, type=Path, help="directory for report.csv/report.json")
    p.add_argument(
        "--backend",
        default="lightweight-stub",
        choices=["none", "lightweight-stub", "inception-like"],
        help="feature backend for FID/LPIPS/DISTS",
    )
    p.add_argument("--backend-weights", default="", help="local weights file for the backend")

    p = sub.add_parser("fetch-weights", help="download backbone weights (network)")
    p.add_argument(
        "--backbone",
        required=True,
        choices=["resnet", "vit", "swinv2", "inception"],
    )
    p.add_argument("--dest", type=Path, default=None, help="weights directory (default: registry)")

    return parser


def _cmd_synth(args) -> int:
    manifest = make_synthetic_dataset(args.n, args.seed, args.out, tuple(args.size))
    print(f"wrote {len(manifest)} pairs under {args.out}")
    return 0


def _cmd_train(args) -> int:
    from . import trainer as trainer_mod
    from .checkpoint import latest_checkpoint

    cfg = load_config(args.config)
    apply_overrides(cfg, args.overrides)
    train_config, gen_spec, disc_spec, extractor_spec = to_specs(cfg, args.out, args.seed)
    if not cfg["data"]["root"]:
        raise ConfigError("data.root is not set")
    manifest = load_manifest(cfg["data"]["root"], cfg["data"]["layout"])

    train_config.out_dir.mkdir(parents=True, exist_ok=True)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.out is not None:
        cfg["train"]["out_dir"] = str(args.out)
    (train_config.out_dir / "effective.toml").write_text(dump_toml(cfg), encoding="utf-8")

    resume_from = None
    if args.resume == "latest":
        resume_from = latest_checkpoint(train_config.out_dir / "checkpoints")
        if resume_from is None:
            raise ConfigError(f"no checkpoint to resume under {train_config.out_dir / 'checkpoints'}")
    elif args.resume is not None:
        resume_from = Path(args.resume)

    t = trainer_mod.fit(
        train_config, manifest, gen_spec, disc_spec, extractor_spec, resume_from=resume_from
    )
    b = t.last_breakdown
    if b is not None:
        print(
            f"finished {t.step} steps: L_total={b.total:.4f} "
            f"(GAN {b.gan:.4f}, FM {b.fm:.4f}, SSIM {b.ssim:.4f})"
        )
    print(f"final checkpoint: {t.last_checkpoint}")
    return 0


def _cmd_translate(args) -> int:
    from .trainer import translate

    start = time.monotonic()
    written, failures = translate(args.checkpoint, args.input, args.out)
    elapsed = time.monotonic() - start
    if not written and not failures:
        print(f"no inputs under {args.input}", file=sys.stderr)
        return 2
    print(f"translated {len(written)} image(s) in {elapsed:.1f}s -> {args.out}")
    if failures:
        for path, reason in failures:
            print(f"failed: {path}: {reason}", file=sys.stderr)
        print(f"{len(failures)} input(s) failed", file=sys.stderr)
        return 1
    return 0


def _cmd_evaluate(args) -> int:
    from .metrics import DIRECTIONS, evaluate_dirs

    report = evaluate_dirs(args.gen, args.gt, args.backend, args.backend_weights)
    args.out.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.out / "report.csv")
    report.to_json(args.out / "report.json")

    arrows = {"higher": "↑", "lower": "↓"}
    print(f"{len(report.per_image)} image(s), backend: {report.backend or 'none'}")
    for key, agg in report.aggregates.items():
        arrow = arrows[DIRECTIONS[key]]
        if agg is None:
            print(f"  {key:>6} {arrow}  skipped")
        else:
            print(f"  {key:>6} {arrow}  {agg['mean']:.4f} ± {agg['std']:.4f}")
    fid_arrow = arrows[DIRECTIONS["fid"]]
    if report.fid is not None:
        print(f"  {'fid':>6} {fid_arrow}  {report.fid:.4f}")
    else:
        print(f"  {'fid':>6} {fid_arrow}  skipped")
    print(f"reports written to {args.out}")
    return 0


def _cmd_fetch_weights(args) -> int:
    import torch

    from .extractor import resolve_weights_dir

    dest = args.dest if args.dest is not None else resolve_weights_dir()
    dest.mkdir(parents=True, exist_ok=True)
    target = dest / f"{args.backbone}.pt"
    print(f"downloading {args.backbone} weights to {target} ...")
    if args.backbone == "resnet":
        from torchvision.models import ResNet50_Weights

        state = ResNet50_Weights.IMAGENET1K_V2.get_state_dict(progress=True)
    elif args.backbone == "vit":
        from torchvision.models import ViT_B_16_Weights

        state = ViT_B_16_Weights.IMAGENET1K_V1.get_state_dict(progress=True)
    elif args.backbone == "swinv2":
        from torchvision.models import Swin_V2_T_Weights

        state = Swin_V2_T_Weights.IMAGENET1K_V1.get_state_dict(progress=True)
    else:
        from torchvision.models import Inception_V3_Weights

        state = Inception_V3_Weights.IMAGENET1K_V1.get_state_dict(progress=True)
    torch.save(state, target)
    print(f"saved {target}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "translate": _cmd_translate,
    "evaluate": _cmd_evaluate,
    "fetch-weights": _cmd_fetch_weights,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        logger.debug("unhandled failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
