"""Full-reference image quality metrics: PSNR and SSIM, plus set evaluation.

SSIM follows the canonical single-scale definition: 11x11 Gaussian window
with sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range L = 1, sample statistics
computed with valid-region convolution (no padding), final score the mean of
the local SSIM map.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_HEADER = ["view", "azimuth_rad", "elevation_rad", "psnr_db", "ssim"]


def _pixels(img) -> np.ndarray:
    p = getattr(img, "pixels", img)
    return np.asarray(p, dtype=np.float64)


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"dimension mismatch: {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # valid-region weighted local means via explicit sliding windows
    win = np.lib.stride_tricks.sliding_window_view(x, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b) -> float:
    """Mean structural similarity of two [0, 1] images of equal size."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"dimension mismatch: {pa.shape} vs {pb.shape}")
    if min(pa.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} px per side, got {pa.shape}")
    kernel = _gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    mu_a = _windowed_mean(pa, kernel)
    mu_b = _windowed_mean(pb, kernel)
    var_a = _windowed_mean(pa * pa, kernel) - mu_a**2
    var_b = _windowed_mean(pb * pb, kernel) - mu_b**2
    cov = _windowed_mean(pa * pb, kernel) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalRow:
    view: int
    azimuth_rad: float
    elevation_rad: float
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    view_set: str
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def summary_line(self) -> str:
        return f"mean_psnr={self.mean_psnr} mean_ssim={self.mean_ssim} n={len(self.rows)}"

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.view, repr(r.azimuth_rad), repr(r.elevation_rad), repr(r.psnr_db), repr(r.ssim)])


def evaluate_set(pred_dir: str, gt_dir: str, manifest, view_set: str = "hemisphere") -> EvalReport:
    """Per-view PSNR/SSIM between predicted and ground-truth images.

    Predictions are looked up in ``pred_dir`` by the manifest record's
    canonical image name; ground truth comes from the record's stored image
    path (one resolution must have been selected on the manifest records,
    see :func:`xraynvs.train.DatasetManifest.at_resolution`).
    """
    from xraynvs.imgio import load_png16  # local import to keep metrics standalone

    report = EvalReport(view_set=view_set)
    for rec in manifest.records:
        # multi-volume prediction sets nest per volume; single-source runs are flat
        pred_path = os.path.join(pred_dir, rec.image_name())
        if rec.volume:
            nested = os.path.join(pred_dir, rec.volume, rec.image_name())
            if os.path.exists(nested):
                pred_path = nested
        gt_path = os.path.join(gt_dir, rec.gt_image_path())
        if not os.path.exists(pred_path):
            raise FileNotFoundError(f"missing prediction: {pred_path}")
        if not os.path.exists(gt_path):
            raise FileNotFoundError(f"missing ground truth: {gt_path}")
        pred = load_png16(pred_path)
        gt = load_png16(gt_path)
        if pred.shape != gt.shape:
            raise ValueError(f"view {rec.index}: shape mismatch {pred.shape} vs {gt.shape}")
        report.rows.append(
            EvalRow(
                view=rec.index,
                azimuth_rad=rec.azimuth_rad,
                elevation_rad=rec.elevation_rad,
                psnr_db=psnr(pred, gt, 1.0),
                ssim=ssim(pred, gt),
            )
        )
    return report
