import json

import numpy as np
import pytest
from PIL import Image

from pix2next.cli import main

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth -> train round shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["synth", "--out", str(data), "--n", "8", "--seed", "123", "--size", "64", "64"]) == 0

    config = root / "run.toml"
    config.write_text(
        f"""
[data]
root = "{data.as_posix()}"
resize = [64, 64]

[generator]
base_width = 32

[discriminator]
layers = 3

[train]
out_dir = "{run.as_posix()}"
batch_size = 4
max_steps = 2
"""
    )
    code = main(
        ["train", "--config", str(config), "--seed", "5", "--set", "train.warmup_frac=0.0"]
    )
    assert code == 0
    return {"root": root, "data": data, "run": run, "config": config}


class TestParser:
    def test_version_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "pix2next" in capsys.readouterr().out

    def test_missing_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_backend_choice_rejected(self):
        with pytest.raises(SystemExit) as exc:
            main(["fetch-weights", "--backbone", "vgg"])
        assert exc.value.code == 2


class TestSynth:
    def test_writes_paired_tree(self, tmp_path, capsys):
        out = tmp_path / "ds"
        assert main(["synth", "--out", str(out), "--n", "3", "--seed", "7", "--size", "32", "32"]) == 0
        assert "wrote 3 pairs" in capsys.readouterr().out
        assert sorted(p.name for p in (out / "rgb").iterdir()) == sorted(
            p.name for p in (out / "nir").iterdir()
        )
        with Image.open(next((out / "rgb").iterdir())) as img:
            assert img.size == (32, 32)

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            main(["synth", "--out", str(tmp_path / name), "--n", "2", "--seed", "9", "--size", "32", "32"])
        for sub in ("rgb", "nir"):
            for pa in sorted((tmp_path / "a" / sub).iterdir()):
                pb = tmp_path / "b" / sub / pa.name
                assert pa.read_bytes() == pb.read_bytes()

    def test_invalid_n(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x"), "--n", "0"]) == 2


class TestTrain:
    def test_artifacts(self, pipeline):
        run = pipeline["run"]
        steps = [json.loads(l)["step"] for l in (run / "log.jsonl").read_text().splitlines()]
        assert steps == [1, 2]
        assert (run / "checkpoints" / "step-000002" / "manifest.json").is_file()

        effective = tomllib.loads((run / "effective.toml").read_text())
        assert effective["train"]["seed"] == 5  # --seed folded in
        assert effective["train"]["warmup_frac"] == 0.0  # --set folded in
        assert effective["generator"]["base_width"] == 32

    def test_attention_override_recorded(self, pipeline, tmp_path):
        out = tmp_path / "b-only"
        code = main(
            [
                "train",
                "--config", str(pipeline["config"]),
                "--out", str(out),
                "--set", "generator.attention=B-only",
                "--set", "train.max_steps=1",
            ]
        )
        assert code == 0
        manifest = json.loads(
            (out / "checkpoints" / "step-000001" / "manifest.json").read_text()
        )
        assert manifest["specs"]["generator"]["attention"] == "B-only"

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nmax_stepz = 5\n")
        assert main(["train", "--config", str(bad)]) == 2

    def test_unset_data_root_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text("[train]\nmax_steps = 1\n")
        assert main(["train", "--config", str(cfg)]) == 2

    def test_resume_latest_without_checkpoint(self, tmp_path, pipeline):
        code = main(
            [
                "train",
                "--config", str(pipeline["config"]),
                "--out", str(tmp_path / "fresh"),
                "--resume",
            ]
        )
        assert code == 2

    def test_resume_from_explicit_checkpoint(self, tmp_path, pipeline):
        out = tmp_path / "resumed"
        code = main(
            [
                "train",
                "--config", str(pipeline["config"]),
                "--seed", "5",
                "--out", str(out),
                "--set", "train.max_steps=4",
                "--resume", str(pipeline["run"] / "checkpoints" / "step-000002"),
            ]
        )
        assert code == 0
        steps = [json.loads(l)["step"] for l in (out / "log.jsonl").read_text().splitlines()]
        assert steps == [3, 4]
        assert (out / "checkpoints" / "step-000004").is_dir()


class TestTranslate:
    def test_end_to_end(self, pipeline, tmp_path, capsys):
        ckpt = pipeline["run"] / "checkpoints" / "step-000002"
        out = tmp_path / "pred"
        code = main(
            ["translate", "--checkpoint", str(ckpt), "--input", str(pipeline["data"] / "rgb"), "--out", str(out)]
        )
        assert code == 0
        assert "translated 8 image(s)" in capsys.readouterr().out
        names = sorted(p.name for p in out.iterdir())
        assert names == sorted(p.name for p in (pipeline["data"] / "rgb").iterdir())
        with Image.open(out / names[0]) as img:
            assert img.mode == "L" and img.size == (64, 64)

    def test_empty_input_dir(self, pipeline, tmp_path, capsys):
        ckpt = pipeline["run"] / "checkpoints" / "step-000002"
        empty = tmp_path / "empty"
        empty.mkdir()
        code = main(
            ["translate", "--checkpoint", str(ckpt), "--input", str(empty), "--out", str(tmp_path / "o")]
        )
        assert code == 2
        assert "no inputs" in capsys.readouterr().err

    def test_failures_exit_one(self, pipeline, tmp_path, capsys):
        ckpt = pipeline["run"] / "checkpoints" / "step-000002"
        src = tmp_path / "inputs"
        src.mkdir()
        Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(src / "ok.png")
        (src / "bad.png").write_text("nope")
        code = main(
            ["translate", "--checkpoint", str(ckpt), "--input", str(src), "--out", str(tmp_path / "o")]
        )
        assert code == 1
        err = capsys.readouterr().err
        assert "bad.png" in err

    def test_missing_checkpoint(self, tmp_path):
        code = main(
            ["translate", "--checkpoint", str(tmp_path / "none"), "--input", str(tmp_path), "--out", str(tmp_path / "o")]
        )
        assert code == 2


class TestEvaluate:
    def test_predictions_against_truth(self, pipeline, tmp_path, capsys):
        ckpt = pipeline["run"] / "checkpoints" / "step-000002"
        pred = tmp_path / "pred"
        main(["translate", "--checkpoint", str(ckpt), "--input", str(pipeline["data"] / "rgb"), "--out", str(pred)])
        out = tmp_path / "report"
        code = main(
            ["evaluate", "--gen", str(pred), "--gt", str(pipeline["data"] / "nir"), "--out", str(out)]
        )
        assert code == 0
        assert (out / "report.csv").is_file()
        payload = json.loads((out / "report.json").read_text())
        assert payload["n_images"] == 8
        assert payload["fid"] is not None
        printed = capsys.readouterr().out
        assert "psnr" in printed and "fid" in printed and "↑" in printed

    def test_backend_none(self, pipeline, tmp_path, capsys):
        gt = pipeline["data"] / "nir"
        out = tmp_path / "report"
        code = main(
            ["evaluate", "--gen", str(gt), "--gt", str(gt), "--out", str(out), "--backend", "none"]
        )
        assert code == 0
        payload = json.loads((out / "report.json").read_text())
        assert payload["skipped"] == ["lpips", "dists", "fid"]
        assert "skipped" in capsys.readouterr().out

    def test_unpaired_dirs_exit_two(self, pipeline, tmp_path, capsys):
        solo = tmp_path / "solo"
        solo.mkdir()
        src = next((pipeline["data"] / "nir").iterdir())
        (solo / "different_name.png").write_bytes(src.read_bytes())
        code = main(
            ["evaluate", "--gen", str(solo), "--gt", str(pipeline["data"] / "nir"), "--out", str(tmp_path / "r")]
        )
        assert code == 2
        assert "different_name" in capsys.readouterr().err
