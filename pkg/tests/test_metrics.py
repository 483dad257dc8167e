import math
import os

import numpy as np
import pytest

from xraynvs.metrics import EvalReport, EvalRow, evaluate_set, psnr, ssim
from xraynvs.imgio import save_png16
from xraynvs.train import build_dataset


def gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_oracle(a, b):
    """Direct sliding-window implementation, scalar loops over positions."""
    k = gaussian_kernel()
    c1, c2 = 0.01**2, 0.03**2
    h, w = a.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            wa = a[i : i + 11, j : j + 11]
            wb = b[i : i + 11, j : j + 11]
            mu_a = float((wa * k).sum())
            mu_b = float((wb * k).sum())
            va = float((wa * wa * k).sum()) - mu_a**2
            vb = float((wb * wb * k).sum()) - mu_b**2
            cov = float((wa * wb * k).sum()) - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestPsnr:
    def test_identical_images_sentinel(self):
        a = np.random.default_rng(0).uniform(0, 1, (8, 8))
        assert psnr(a, a.copy()) == math.inf

    def test_arithmetic(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE 0.01
        assert psnr(a, b, 1.0) == pytest.approx(20.0, abs=1e-9)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(0, 1, (9, 7)), rng.uniform(0, 1, (9, 7))
        mse = 0.0
        for x, y in zip(a.ravel(), b.ravel()):
            mse += (x - y) ** 2
        mse /= a.size
        assert psnr(a, b, 1.0) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_monotone_in_noise(self):
        # one fixed noise field scaled up level by level: larger variance
        # never increases PSNR
        rng = np.random.default_rng(2)
        base = rng.uniform(0.2, 0.8, (16, 16))
        noise = rng.standard_normal(base.shape)
        values = [psnr(base, base + noise * (0.002 * level)) for level in range(1, 21)]
        assert all(x > y for x, y in zip(values, values[1:]))


class TestSsim:
    def test_self_similarity(self):
        a = np.random.default_rng(0).uniform(0, 1, (16, 16))
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-9)

    def test_constant_images_closed_form(self):
        # mu_a=0, mu_b=1, all variances zero: map value is C1 / (1 + C1)
        a = np.zeros((12, 12))
        b = np.ones((12, 12))
        want = (0.01**2) / (1 + 0.01**2)
        assert ssim(a, b) == pytest.approx(want, abs=1e-12)

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (20, 14))
        b = np.clip(a + rng.standard_normal((20, 14)) * 0.1, 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_flip_invariance(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        assert ssim(a[::-1], b[::-1]) == pytest.approx(ssim(a, b), abs=1e-12)
        assert ssim(a[:, ::-1], b[:, ::-1]) == pytest.approx(ssim(a, b), abs=1e-12)

    def test_small_images_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))

    def test_range(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            a, b = rng.uniform(0, 1, (12, 12)), rng.uniform(0, 1, (12, 12))
            assert -1.0 <= ssim(a, b) <= 1.0


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("evalds"))
    man = build_dataset(1, 4, [16], 1.8, seed=3, out_dir=out, phantom_dims=(16, 16, 16))
    return out, man


class TestEvaluateSet:
    def test_oracle_predictions(self, dataset, tmp_path):
        out, man = dataset
        bound = man.at_resolution(16)
        pred = str(tmp_path / "pred")
        os.makedirs(pred)
        for rec in bound.records:
            blob = open(os.path.join(out, rec.gt_image_path()), "rb").read()
            open(os.path.join(pred, rec.image_name()), "wb").write(blob)
        rep = evaluate_set(pred, out, bound, view_set="simple")
        assert len(rep.rows) == 4
        assert rep.mean_ssim == pytest.approx(1.0, abs=1e-9)
        assert rep.mean_psnr == math.inf

    def test_constant_midgray_psnr_recomputed(self, dataset, tmp_path):
        out, man = dataset
        bound = man.at_resolution(16)
        pred = str(tmp_path / "gray")
        os.makedirs(pred)
        gray = np.full((16, 16), 0.5)
        for rec in bound.records:
            save_png16(os.path.join(pred, rec.image_name()), gray)
        rep = evaluate_set(pred, out, bound, view_set="simple")
        from xraynvs.imgio import load_png16

        want = []
        gq = load_png16(os.path.join(pred, bound.records[0].image_name()))
        for rec in bound.records:
            gt = load_png16(os.path.join(out, rec.gt_image_path()))
            mse = float(np.mean((gq - gt) ** 2))
            want.append(10 * math.log10(1.0 / mse))
        assert rep.mean_psnr == pytest.approx(float(np.mean(want)), abs=1e-9)

    def test_missing_prediction_raises(self, dataset, tmp_path):
        out, man = dataset
        bound = man.at_resolution(16)
        with pytest.raises(FileNotFoundError):
            evaluate_set(str(tmp_path / "empty"), out, bound)

    def test_report_csv_and_summary(self, tmp_path):
        rep = EvalReport(view_set="simple", rows=[EvalRow(1, 0.1, 0.2, 30.0, 0.9), EvalRow(2, 0.3, 0.4, 20.0, 0.7)])
        assert rep.mean_psnr == pytest.approx(25.0)
        assert rep.mean_ssim == pytest.approx(0.8)
        path = str(tmp_path / "r.csv")
        rep.write_csv(path)
        lines = open(path).read().strip().splitlines()
        assert lines[0] == "view,azimuth_rad,elevation_rad,psnr_db,ssim"
        assert len(lines) == 3
        assert rep.summary_line() == f"mean_psnr={rep.mean_psnr} mean_ssim={rep.mean_ssim} n=2"
