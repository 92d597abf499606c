import csv
import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from pix2next.metrics import (
    CSV_HEADER,
    DIRECTIONS,
    StubFeatureBackend,
    dists,
    evaluate_dirs,
    evaluate_pair,
    fid_from_embeddings,
    frechet_distance,
    get_feature_backend,
    lpips,
    pixel_std,
    psnr,
    rmse,
    ssim,
)


def smooth_image(seed, side=64):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    img = np.zeros((side, side))
    for _ in range(3):
        fy, fx, phase = rng.uniform(0.5, 3.0, 3)
        img += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    lo, hi = img.min(), img.max()
    return (0.2 + 0.6 * (img - lo) / (hi - lo)).astype(np.float64)


class TestPixelMetrics:
    def test_identity_values(self):
        img = smooth_image(0)
        assert psnr(img, img) == float("inf")
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)
        assert rmse(img, img) == 0.0
        assert pixel_std(img, img) == 0.0

    def test_psnr_rmse_consistency(self):
        a, b = smooth_image(1), smooth_image(2)
        r = rmse(a, b)
        assert psnr(a, b) == pytest.approx(20 * math.log10(255.0 / r), abs=1e-6)

    def test_constant_offset_hand_values(self):
        gt = np.full((32, 32), 0.25)
        gen = np.full((32, 32), 0.75)
        assert rmse(gen, gt) == pytest.approx(127.5)
        assert pixel_std(gen, gt) == pytest.approx(0.0, abs=1e-9)
        assert psnr(gen, gt) == pytest.approx(10 * math.log10(1 / 0.25), abs=1e-6)

    def test_small_offset_twenty_db(self):
        gt = np.full((32, 32), 0.4)
        gen = gt + 0.1
        assert psnr(gen, gt) == pytest.approx(20.0, abs=1e-9)
        assert rmse(gen, gt) == pytest.approx(25.5)
        assert pixel_std(gen, gt) == pytest.approx(0.0, abs=1e-9)

    def test_checkerboard_error_is_pure_std(self):
        gt = np.full((32, 32), 0.5)
        sign = (-1.0) ** (np.add.outer(np.arange(32), np.arange(32)))
        gen = gt + 0.1 * sign
        # alternating error has zero mean, so rmse is all spread
        assert pixel_std(gen, gt) == pytest.approx(25.5)
        assert rmse(gen, gt) == pytest.approx(25.5)

    def test_error_decomposition(self):
        # rmse^2 = std^2 + mean_error^2, both on the 255 scale
        for seed in range(5):
            a, b = smooth_image(seed), smooth_image(seed + 10)
            err_mean = float(np.mean((a - b) * 255.0))
            assert rmse(a, b) ** 2 == pytest.approx(
                pixel_std(a, b) ** 2 + err_mean**2, rel=1e-9
            )

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((8, 8)), np.zeros((4, 4)))

    def test_directions_and_header(self):
        assert CSV_HEADER == ["id", "psnr", "ssim", "rmse", "std", "lpips", "dists"]
        assert DIRECTIONS["psnr"] == "higher"
        assert DIRECTIONS["ssim"] == "higher"
        for key in ("rmse", "std", "fid", "lpips", "dists"):
            assert DIRECTIONS[key] == "lower"


class TestFrechet:
    def test_identical_sets_zero(self):
        e = np.random.default_rng(0).normal(size=(16, 8))
        assert fid_from_embeddings(e, e) == pytest.approx(0.0, abs=1e-10)

    def test_one_dimensional_hand_value(self):
        # means 0 and 1, sample variances (ddof 1) 1 and 4:
        # FID = 1 + (1 + 4 - 2 * sqrt(4)) = 2
        r = math.sqrt(0.5)
        e1 = np.array([[-r], [r]])
        e2 = np.array([[1 - math.sqrt(2.0)], [1 + math.sqrt(2.0)]])
        assert fid_from_embeddings(e1, e2) == pytest.approx(2.0, abs=1e-9)

    def test_diagonal_closed_form(self):
        mu1, mu2 = np.zeros(2), np.ones(2)
        c1 = np.diag([1.0, 4.0])
        c2 = np.diag([9.0, 16.0])
        # |d mu|^2 = 2; trace term = (1+4+9+16) - 2*(3+8) = 8
        assert frechet_distance(mu1, c1, mu2, c2) == pytest.approx(10.0, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        e1 = rng.normal(size=(32, 6))
        e2 = rng.normal(1.0, 2.0, size=(40, 6))
        assert fid_from_embeddings(e1, e2) == pytest.approx(
            fid_from_embeddings(e2, e1), abs=1e-6
        )

    def test_single_sample_raises(self):
        with pytest.raises(ValueError):
            fid_from_embeddings(np.zeros((1, 4)), np.zeros((5, 4)))


class TestStubBackend:
    def test_deterministic_construction(self):
        a = StubFeatureBackend()
        b = StubFeatureBackend()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_tap_and_embed_shapes(self):
        backend = StubFeatureBackend()
        x = torch.rand(2, 1, 64, 64)
        taps = backend.taps(x)
        assert [t.shape[1] for t in taps] == [8, 16, 32, 64]
        assert [t.shape[-1] for t in taps] == [32, 16, 8, 4]
        assert backend.embed(x).shape == (2, 64)

    def test_frozen(self):
        backend = StubFeatureBackend()
        assert all(not p.requires_grad for p in backend.parameters())

    def test_registry(self):
        assert get_feature_backend("lightweight-stub").name == "lightweight-stub"
        assert get_feature_backend(None) is None
        assert get_feature_backend("none") is None
        with pytest.raises(ValueError):
            get_feature_backend("vgg")


class TestPerceptual:
    def setup_method(self):
        self.backend = StubFeatureBackend()
        self.gt = torch.from_numpy(smooth_image(7)).float()[None, None]

    def _noisy(self, sigma):
        noise = torch.from_numpy(
            np.random.default_rng(99).normal(0, sigma, (64, 64))
        ).float()[None, None]
        return (self.gt + noise).clamp(0, 1)

    def test_zero_at_identity(self):
        assert lpips(self.gt, self.gt, self.backend) == pytest.approx(0.0, abs=1e-8)
        assert dists(self.gt, self.gt, self.backend) == pytest.approx(0.0, abs=1e-6)

    def test_monotone_in_noise(self):
        lp = [lpips(self._noisy(s), self.gt, self.backend) for s in (0.05, 0.1, 0.2)]
        dt = [dists(self._noisy(s), self.gt, self.backend) for s in (0.05, 0.1, 0.2)]
        assert lp[0] < lp[1] < lp[2]
        assert dt[0] < dt[1] < dt[2]
        assert all(v > 0 for v in lp + dt)

    def test_evaluate_pair_keys(self):
        row = evaluate_pair(smooth_image(1), smooth_image(2), self.backend)
        assert set(row) == {"psnr", "ssim", "rmse", "std", "lpips", "dists"}
        assert all(v is not None for v in row.values())
        row_bare = evaluate_pair(smooth_image(1), smooth_image(2))
        assert row_bare["lpips"] is None and row_bare["dists"] is None

    def test_noisy_pair_worse_on_every_metric(self):
        gt = smooth_image(7)
        clean = evaluate_pair(gt, gt, self.backend)
        noisy = evaluate_pair(self._noisy(0.1)[0, 0].numpy(), gt, self.backend)
        for name in ("psnr", "ssim"):
            assert noisy[name] < clean[name]
        for name in ("rmse", "std", "lpips", "dists"):
            assert noisy[name] > clean[name]


def write_corpus(directory, images):
    directory.mkdir(parents=True, exist_ok=True)
    for stem, img in images.items():
        band = np.round(img * 255).astype(np.uint8)
        Image.fromarray(band, mode="L").save(directory / f"{stem}.png")


class TestEvaluateDirs:
    def test_identity_corpus(self, tmp_path):
        images = {f"im{i}": smooth_image(i) for i in range(3)}
        write_corpus(tmp_path / "gen", images)
        write_corpus(tmp_path / "gt", images)
        report = evaluate_dirs(tmp_path / "gen", tmp_path / "gt")
        assert report.backend == "lightweight-stub"
        assert report.skipped == []
        assert len(report.per_image) == 3
        for row in report.per_image:
            assert row["psnr"] == float("inf")
            assert row["rmse"] == 0.0
            assert row["ssim"] == pytest.approx(1.0, abs=1e-9)
        assert report.fid == pytest.approx(0.0, abs=1e-6)
        assert report.aggregates["rmse"]["mean"] == 0.0
        assert math.isinf(report.aggregates["psnr"]["mean"])
        assert math.isnan(report.aggregates["psnr"]["std"])

    def test_csv_and_json_outputs(self, tmp_path):
        images = {f"im{i}": smooth_image(i) for i in range(3)}
        write_corpus(tmp_path / "gen", images)
        write_corpus(tmp_path / "gt", images)
        report = evaluate_dirs(tmp_path / "gen", tmp_path / "gt")
        report.to_csv(tmp_path / "report.csv")
        report.to_json(tmp_path / "report.json")

        with open(tmp_path / "report.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == CSV_HEADER
        assert len(rows) == 4
        by_id = {r[0]: r for r in rows[1:]}
        assert set(by_id) == set(images)
        assert all(r[1] == "inf" for r in rows[1:])
        assert all(float(r[3]) == 0.0 for r in rows[1:])

        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["n_images"] == 3
        assert payload["backend"] == "lightweight-stub"
        assert payload["aggregates"]["psnr"]["mean"] == "inf"
        assert payload["aggregates"]["psnr"]["std"] is None  # NaN maps to null
        assert payload["directions"] == DIRECTIONS
        assert payload["per_image"][0]["psnr"] == "inf"

    def test_aggregates_match_rows(self, tmp_path):
        gen = {f"im{i}": smooth_image(i) for i in range(4)}
        gt = {f"im{i}": smooth_image(i + 20) for i in range(4)}
        write_corpus(tmp_path / "gen", gen)
        write_corpus(tmp_path / "gt", gt)
        report = evaluate_dirs(tmp_path / "gen", tmp_path / "gt")
        for key in ("psnr", "ssim", "rmse", "std", "lpips", "dists"):
            values = [row[key] for row in report.per_image]
            assert report.aggregates[key]["mean"] == pytest.approx(np.mean(values), abs=1e-9)
            assert report.aggregates[key]["std"] == pytest.approx(np.std(values), abs=1e-9)
        assert report.fid is not None and report.fid > 0

    def test_backend_none_skips_feature_metrics(self, tmp_path):
        images = {f"im{i}": smooth_image(i) for i in range(2)}
        write_corpus(tmp_path / "gen", images)
        write_corpus(tmp_path / "gt", images)
        report = evaluate_dirs(tmp_path / "gen", tmp_path / "gt", backend="none")
        assert report.skipped == ["lpips", "dists", "fid"]
        assert report.fid is None
        assert report.aggregates["lpips"] is None
        report.to_csv(tmp_path / "report.csv")
        with open(tmp_path / "report.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert all(r[5] == "" and r[6] == "" for r in rows[1:])
        report.to_json(tmp_path / "report.json")
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["fid"] is None
        assert payload["skipped"] == ["lpips", "dists", "fid"]

    def test_unavailable_backend_degrades(self, tmp_path):
        images = {"a": smooth_image(0), "b": smooth_image(1)}
        write_corpus(tmp_path / "gen", images)
        write_corpus(tmp_path / "gt", images)
        report = evaluate_dirs(
            tmp_path / "gen",
            tmp_path / "gt",
            backend="inception-like",
            backend_weights=str(tmp_path / "missing.pt"),
        )
        assert report.skipped == ["lpips", "dists", "fid"]
        assert report.backend is None
        assert report.per_image[0]["psnr"] == float("inf")

    def test_single_image_skips_fid_only(self, tmp_path):
        write_corpus(tmp_path / "gen", {"only": smooth_image(0)})
        write_corpus(tmp_path / "gt", {"only": smooth_image(0)})
        report = evaluate_dirs(tmp_path / "gen", tmp_path / "gt")
        assert report.fid is None
        assert "fid" in report.skipped
        assert report.per_image[0]["lpips"] is not None

    def test_unpaired_corpora_raise(self, tmp_path):
        write_corpus(tmp_path / "gen", {"a": smooth_image(0), "b": smooth_image(1)})
        write_corpus(tmp_path / "gt", {"a": smooth_image(0), "c": smooth_image(2)})
        with pytest.raises(ValueError, match="unpaired"):
            evaluate_dirs(tmp_path / "gen", tmp_path / "gt")

    def test_empty_dir_raises(self, tmp_path):
        write_corpus(tmp_path / "gen", {"a": smooth_image(0)})
        (tmp_path / "gt").mkdir()
        with pytest.raises(ValueError, match="no images"):
            evaluate_dirs(tmp_path / "gen", tmp_path / "gt")
