"""Image-quality metrics checked against closed forms and slow oracles."""

import json
import math

import numpy as np
import pytest

from keygate.errors import ConfigurationError
from keygate.metrics import (
    MetricsReport,
    REPORT_CSV_FIELDS,
    bit_accuracy,
    evaluate_condition,
    feature_distance,
    psnr,
    ssim,
    write_reports_csv,
    write_reports_jsonl,
)

# The implementation weights each 11x11 window with a sigma=1.5 Gaussian on
# Rec.601 luminance; the oracle below rebuilds both from their definitions.
_LUMA = np.array([0.299, 0.587, 0.114])


def _ssim_oracle(a: np.ndarray, b: np.ndarray) -> float:
    la = a @ _LUMA if a.ndim == 3 else np.asarray(a, dtype=np.float64)
    lb = b @ _LUMA if b.ndim == 3 else np.asarray(b, dtype=np.float64)
    x = np.arange(-5, 6, dtype=np.float64)
    k = np.exp(-0.5 * (x / 1.5) ** 2)
    win = np.outer(k, k) / np.outer(k, k).sum()
    c1, c2 = 0.01**2, 0.03**2
    h, w = la.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            pa = la[i : i + 11, j : j + 11]
            pb = lb[i : i + 11, j : j + 11]
            mu_a = (win * pa).sum()
            mu_b = (win * pb).sum()
            var_a = (win * pa * pa).sum() - mu_a**2
            var_b = (win * pb * pb).sum() - mu_b**2
            cov = (win * pa * pb).sum() - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            vals.append(num / den)
    return float(np.mean(vals))


class TestPsnr:
    def test_identical_hits_cap(self):
        img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        assert psnr(img, img) == 99.0

    def test_uniform_difference_spot_value(self):
        a = np.zeros((8, 8, 3))
        b = np.full((8, 8, 3), 100.0 / 255.0)
        assert psnr(a, b) == pytest.approx(8.1308, abs=1e-4)
        assert psnr(a, b) == pytest.approx(20.0 * math.log10(255.0 / 100.0), rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            psnr(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(2).random((16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_two_constant_closed_form(self):
        a = np.full((16, 16, 3), 0.3)
        b = np.full((16, 16, 3), 0.7)
        expected = (2 * 0.3 * 0.7 + 0.01**2) / (0.3**2 + 0.7**2 + 0.01**2)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-10)

    def test_matches_windowed_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.random((14, 17, 3))
        b = np.clip(a + rng.normal(0.0, 0.1, a.shape), 0.0, 1.0)
        assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b), abs=1e-10)

    def test_inversion_scores_low(self):
        # No mid-gray pixels, so a and 1-a disagree everywhere.
        a = np.random.default_rng(4).uniform(0.0, 0.35, (16, 16, 3))
        val = ssim(a, 1.0 - a)
        assert val < 0.5
        assert val == pytest.approx(_ssim_oracle(a, 1.0 - a), abs=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((13, 13, 3)), rng.random((13, 13, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-12)

    def test_smaller_than_window_rejected(self):
        with pytest.raises(ConfigurationError):
            ssim(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))


def _image_set(rng: np.random.Generator, n: int = 8, size: int = 16) -> np.ndarray:
    base = rng.random((n, size, size, 3)).astype(np.float32)
    return base


class TestFeatureDistance:
    def test_identical_sets_near_zero(self):
        imgs = _image_set(np.random.default_rng(6))
        assert feature_distance(imgs, imgs) < 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(7)
        a, b = _image_set(rng), _image_set(rng)
        assert feature_distance(a, b) == pytest.approx(feature_distance(b, a), abs=1e-6)

    def test_noise_monotonicity(self):
        rng = np.random.default_rng(8)
        clean = _image_set(rng, n=12)
        near = clean + rng.normal(0.0, 0.01, clean.shape).astype(np.float32)
        far = clean + rng.normal(0.0, 0.1, clean.shape).astype(np.float32)
        assert feature_distance(clean, near) < feature_distance(clean, far)

    def test_empty_set_rejected(self):
        imgs = _image_set(np.random.default_rng(9))
        with pytest.raises(ConfigurationError):
            feature_distance(imgs, np.zeros((0, 16, 16, 3)))


class TestNoiseLadders:
    """More noise must read as worse under every image metric."""

    SIGMAS = (0.02, 0.05, 0.1, 0.2)

    @pytest.mark.parametrize("seed", range(20))
    def test_psnr_and_ssim_decrease(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.random((16, 16, 3))
        ps, ss = [], []
        for sigma in self.SIGMAS:
            noisy = img + rng.normal(0.0, sigma, img.shape)
            ps.append(psnr(img, noisy))
            ss.append(ssim(img, noisy))
        assert all(x > y for x, y in zip(ps, ps[1:]))
        assert all(x > y for x, y in zip(ss, ss[1:]))

    @pytest.mark.parametrize("seed", range(20))
    def test_feature_distance_increases(self, seed):
        rng = np.random.default_rng(100 + seed)
        clean = _image_set(rng, n=10)
        dists = [
            feature_distance(clean, clean + rng.normal(0.0, sigma, clean.shape).astype(np.float32))
            for sigma in self.SIGMAS
        ]
        assert all(x < y for x, y in zip(dists, dists[1:]))


class TestBitAccuracy:
    def test_identical_vectors(self):
        bits = np.random.default_rng(10).integers(0, 2, 128)
        assert bit_accuracy(bits, bits) == 1.0

    def test_quarter_flipped(self):
        bits = np.random.default_rng(11).integers(0, 2, 128).astype(np.uint8)
        flipped = bits.copy()
        flipped[:32] ^= 1
        assert bit_accuracy(bits, flipped) == 0.75

    def test_random_pairs_near_half(self):
        rng = np.random.default_rng(12)
        accs = [
            bit_accuracy(rng.integers(0, 2, 64), rng.integers(0, 2, 64))
            for _ in range(1000)
        ]
        assert abs(float(np.mean(accs)) - 0.5) < 0.1

    def test_length_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            bit_accuracy(np.zeros(8), np.zeros(9))

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            bit_accuracy(np.zeros(0), np.zeros(0))


class TestMetricsReport:
    def test_invariants_enforced(self):
        with pytest.raises(ConfigurationError):
            MetricsReport("ori", -1.0, 0.5, 0.0, 4)
        with pytest.raises(ConfigurationError):
            MetricsReport("ori", 30.0, 1.5, 0.0, 4)

    def test_evaluate_condition_aggregates(self):
        rng = np.random.default_rng(13)
        refs = rng.random((4, 16, 16, 3)).astype(np.float32)
        outs = np.clip(refs + rng.normal(0.0, 0.05, refs.shape), 0, 1).astype(np.float32)
        rep = evaluate_condition("wrong_key", outs, refs)
        assert rep.condition == "wrong_key"
        assert rep.sample_count == 4
        assert rep.psnr == pytest.approx(float(np.mean([psnr(o, r) for o, r in zip(outs, refs)])))
        assert 0.0 < rep.ssim < 1.0

    def test_csv_layout(self, tmp_path):
        reports = [
            MetricsReport("ori", 30.0, 0.95, 0.01, 8),
            MetricsReport("no_fuser", 18.5, 0.6, 1.25, 8),
        ]
        path = tmp_path / "report.csv"
        write_reports_csv(reports, path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(REPORT_CSV_FIELDS)
        assert lines[1].startswith("ori,30.0,0.95,0.01,8")
        assert len(lines) == 3

    def test_jsonl_round_trip(self, tmp_path):
        reports = [MetricsReport("removal", 21.25, 0.71, 0.4, 16)]
        path = tmp_path / "report.jsonl"
        write_reports_jsonl(reports, path)
        row = json.loads(path.read_text().splitlines()[0])
        assert row == {
            "condition": "removal",
            "psnr_db": 21.25,
            "ssim": 0.71,
            "fd_proxy": 0.4,
            "sample_count": 16,
        }
