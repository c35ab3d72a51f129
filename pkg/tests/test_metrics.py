"""PSNR/SSIM conventions and report serialization."""

import csv
import io

import numpy as np
import pytest

from aldsr.data import DataError, quantize
from aldsr.metrics import psnr_y, ssim_y, MetricRecord, MetricReport, CSV_HEADER


def gray(v, h=32, w=32):
    """Gray RGB image whose Y plane is (16 + 219 v) / 255."""
    return np.full((3, h, w), v, dtype=np.float64)


class TestPsnr:
    def test_identical_is_inf(self):
        img = gray(0.5)
        assert psnr_y(img, img) == float("inf")

    def test_known_offset_value(self):
        """A uniform Y-plane gap of 1/255 gives exactly 20 log10(255) dB."""
        a = gray(0.25)
        b = gray(0.25 + 1.0 / 219.0)  # Y shifts by 219/255 per unit of gray
        expect = 20.0 * np.log10(255.0)
        assert psnr_y(a, b) == pytest.approx(expect, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(size=(3, 20, 20))
        b = rng.uniform(size=(3, 20, 20))
        assert psnr_y(a, b) == pytest.approx(psnr_y(b, a), abs=1e-12)

    def test_shave_excludes_border(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(3, 24, 24))
        b = a.copy()
        b[:, 0, :] = 0.0  # corrupt only the top row
        assert psnr_y(a, b, shave=0) < 60
        assert psnr_y(a, b, shave=4) == float("inf")

    def test_lower_for_more_noise(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0.2, 0.8, size=(3, 30, 30))
        small = np.clip(a + rng.normal(scale=0.01, size=a.shape), 0, 1)
        large = np.clip(a + rng.normal(scale=0.10, size=a.shape), 0, 1)
        assert psnr_y(a, small) > psnr_y(a, large)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            psnr_y(gray(0.5), gray(0.5, h=16))

    def test_excessive_shave_rejected(self):
        with pytest.raises(DataError, match="shave"):
            psnr_y(gray(0.5, h=8, w=8), gray(0.4, h=8, w=8), shave=4)


class TestSsim:
    def test_identical_is_one(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(3, 24, 24))
        assert ssim_y(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_constant_pair_is_one(self):
        assert ssim_y(gray(0.3), gray(0.3)) == pytest.approx(1.0)

    def test_contrast_inversion_is_negative(self):
        """Equal means, exactly opposite structure: score must go negative."""
        rng = np.random.default_rng(4)
        p = rng.uniform(-0.3, 0.3, size=(24, 24))
        a = np.stack([0.5 + p] * 3)
        b = np.stack([0.5 - p] * 3)
        assert ssim_y(a, b) < 0

    def test_bounded(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a = rng.uniform(size=(3, 16, 16))
            b = rng.uniform(size=(3, 16, 16))
            v = ssim_y(a, b)
            assert -1.0 - 1e-9 <= v <= 1.0 + 1e-9

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0.2, 0.8, size=(3, 32, 32))
        small = np.clip(a + rng.normal(scale=0.01, size=a.shape), 0, 1)
        large = np.clip(a + rng.normal(scale=0.15, size=a.shape), 0, 1)
        assert ssim_y(a, small) > ssim_y(a, large)

    def test_window_too_large_rejected(self):
        with pytest.raises(DataError, match="window"):
            ssim_y(gray(0.5, h=8, w=8), gray(0.5, h=8, w=8))

    def test_shave_applies_before_windows(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(size=(3, 30, 30))
        b = a.copy()
        b[:, :2, :] = 1.0
        assert ssim_y(a, b, shave=3) == pytest.approx(1.0)


class TestReport:
    def make_report(self):
        return MetricReport(
            [
                MetricRecord("baby", 31.25, 0.901234),
                MetricRecord("bird", 29.75, 0.887766),
            ]
        )

    def test_means_are_arithmetic(self):
        rep = self.make_report()
        assert rep.mean_psnr_db == pytest.approx((31.25 + 29.75) / 2)
        assert rep.mean_ssim == pytest.approx((0.901234 + 0.887766) / 2)

    def test_csv_header_and_rows(self):
        text = self.make_report().to_csv_text()
        rows = list(csv.reader(io.StringIO(text)))
        assert tuple(rows[0]) == CSV_HEADER
        assert rows[1][0] == "baby"
        assert float(rows[1][1]) == pytest.approx(31.25)
        assert float(rows[2][2]) == pytest.approx(0.887766)
        assert rows[3][0] == "mean"

    def test_csv_file_round_trip(self, tmp_path):
        p = tmp_path / "m.csv"
        rep = self.make_report()
        rep.write_csv(p)
        rows = list(csv.reader(open(p)))
        assert len(rows) == 4
        assert float(rows[3][1]) == pytest.approx(rep.mean_psnr_db, abs=1e-4)

    def test_table_contains_all_names(self):
        table = self.make_report().format_table()
        for token in ("baby", "bird", "mean", "psnr_db", "ssim"):
            assert token in table

    def test_quantize_then_compare_matches_file_convention(self):
        """Metrics on quantized arrays equal metrics on PNG round-tripped
        data by construction; spot-check quantize stability."""
        rng = np.random.default_rng(8)
        a = rng.uniform(size=(3, 20, 20)).astype(np.float32)
        q = quantize(a)
        assert psnr_y(q, q) == float("inf")
        assert np.all(np.unique(np.round(q * 255) - q * 255) == 0)
