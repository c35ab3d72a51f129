"""Fidelity metrics on the luma plane, plus report containers.

Both metrics convert RGB to studio-swing Y, optionally shave a border
(reconstruction near edges is unreliable and benchmarks exclude it; the
callers default the shave width to the upscaling factor), and accumulate
in float64. Inputs are [3,H,W] arrays in [0,1]; quantize first when the
8-bit benchmark convention is wanted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import rgb_to_y, DataError

__all__ = [
    "psnr_y",
    "ssim_y",
    "MetricRecord",
    "MetricReport",
    "CSV_HEADER",
]

CSV_HEADER = ("name", "psnr_db", "ssim")


def _to_luma_pair(sr, hr, shave):
    if sr.shape != hr.shape:
        raise DataError(f"image shapes differ: {sr.shape} vs {hr.shape}")
    y_sr = rgb_to_y(np.asarray(sr, dtype=np.float64))
    y_hr = rgb_to_y(np.asarray(hr, dtype=np.float64))
    if shave:
        if 2 * shave >= min(y_sr.shape):
            raise DataError(f"shave {shave} leaves no pixels for {y_sr.shape}")
        y_sr = y_sr[shave:-shave, shave:-shave]
        y_hr = y_hr[shave:-shave, shave:-shave]
    return y_sr, y_hr


def psnr_y(sr, hr, shave: int = 0) -> float:
    """Peak signal-to-noise ratio in dB on the Y plane (peak = 1.0).

    Identical inputs give inf.
    """
    y_sr, y_hr = _to_luma_pair(sr, hr, shave)
    mse = float(np.mean((y_sr - y_hr) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_1d(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation, valid region only."""
    t = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(t, len(g), axis=1) @ g


def ssim_y(sr, hr, shave: int = 0) -> float:
    """Mean structural similarity on the Y plane.

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1,
    evaluated on valid window positions only. Returns a value in [-1, 1];
    an image against itself scores exactly 1.
    """
    x, y = _to_luma_pair(sr, hr, shave)
    g = _gaussian_1d()
    if min(x.shape) < len(g):
        raise DataError(f"image {x.shape} smaller than the {len(g)}x{len(g)} ssim window")
    c1 = 0.01**2
    c2 = 0.03**2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sx = _filter_valid(x * x, g) - mu_x * mu_x
    sy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sx + sy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricRecord:
    name: str
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    """Per-image records plus arithmetic means over images."""

    records: list

    @property
    def mean_psnr_db(self) -> float:
        return float(np.mean([r.psnr_db for r in self.records])) if self.records else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.records])) if self.records else float("nan")

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.name, f"{r.psnr_db:.4f}", f"{r.ssim:.6f}"])
        if self.records:
            w.writerow(["mean", f"{self.mean_psnr_db:.4f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    def format_table(self) -> str:
        width = max([len(r.name) for r in self.records] + [len("mean"), 5])
        lines = [f"{'name':<{width}}  {'psnr_db':>9}  {'ssim':>8}"]
        for r in self.records:
            lines.append(f"{r.name:<{width}}  {r.psnr_db:>9.4f}  {r.ssim:>8.6f}")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr_db:>9.4f}  {self.mean_ssim:>8.6f}")
        return "\n".join(lines)
