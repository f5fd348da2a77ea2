"""Image-quality and watermark metrics: PSNR, SSIM, FD-proxy, bit accuracy.

The Fréchet statistic is computed over fixed random conv features rather
than a pretrained network, so it is reported as "FD-proxy" everywhere; the
mean/covariance mathematics are the standard Fréchet form.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .imageops import gaussian_kernel1d, to_luminance

PSNR_CAP_DB = 99.0
FEATURE_SEED = 40427


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate quality of one decode condition measured against a reference."""

    condition: str
    psnr: float
    ssim: float
    feature_distance: float
    sample_count: int

    def __post_init__(self):
        if self.psnr < 0:
            raise ConfigurationError(f"psnr must be >= 0, got {self.psnr}")
        if not -1.0 <= self.ssim <= 1.0:
            raise ConfigurationError(f"ssim must be in [-1, 1], got {self.ssim}")

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "psnr_db": round(self.psnr, 6),
            "ssim": round(self.ssim, 6),
            "fd_proxy": round(self.feature_distance, 6),
            "sample_count": self.sample_count,
        }


REPORT_CSV_FIELDS = ("condition", "psnr_db", "ssim", "fd_proxy", "sample_count")


def write_reports_jsonl(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def write_reports_csv(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.to_dict())


# ----------------------------------------------------------------------- psnr
def _check_pair(a: np.ndarray, b: np.ndarray, op: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over the [0, 1] range, capped at 99."""
    a, b = _check_pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / mse)))


# ----------------------------------------------------------------------- ssim
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _ssim_window() -> np.ndarray:
    k = gaussian_kernel1d(_SSIM_SIGMA, radius=_SSIM_WINDOW // 2)
    return np.outer(k, k)


def _windows(img: np.ndarray, w: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(img, (w, w))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM on luminance, 11x11 Gaussian window, K1/K2 stabilizers."""
    a, b = _check_pair(a, b, "ssim")
    la = to_luminance(a) if a.ndim == 3 else a
    lb = to_luminance(b) if b.ndim == 3 else b
    h, w = la.shape
    if min(h, w) < _SSIM_WINDOW:
        raise ConfigurationError(f"ssim needs images at least {_SSIM_WINDOW}x{_SSIM_WINDOW}, got {h}x{w}")
    win = _ssim_window()
    wa = _windows(la, _SSIM_WINDOW)
    wb = _windows(lb, _SSIM_WINDOW)
    mu_a = np.einsum("hwij,ij->hw", wa, win)
    mu_b = np.einsum("hwij,ij->hw", wb, win)
    ex_aa = np.einsum("hwij,ij->hw", wa * wa, win)
    ex_bb = np.einsum("hwij,ij->hw", wb * wb, win)
    ex_ab = np.einsum("hwij,ij->hw", wa * wb, win)
    var_a = ex_aa - mu_a**2
    var_b = ex_bb - mu_b**2
    cov = ex_ab - mu_a * mu_b
    c1 = _K1**2
    c2 = _K2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ------------------------------------------------------------------- FD proxy
class _FeatureEmbedder:
    """Fixed random conv stack; per-layer spatial means concatenated."""

    def __init__(self, seed: int = FEATURE_SEED):
        rng = np.random.default_rng(seed)
        self.layers = []
        widths = [(3, 8), (8, 16), (16, 32)]
        for cin, cout in widths:
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            b = rng.normal(0.0, 0.05, size=cout)
            self.layers.append((w, b))

    @staticmethod
    def _conv_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        n, c, h, wd = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        oh, ow = h // 2, wd // 2
        cols = np.empty((n, c, 3, 3, oh, ow), dtype=x.dtype)
        for i in range(3):
            for j in range(3):
                cols[:, :, i, j] = xp[:, :, i : i + 2 * oh : 2, j : j + 2 * ow : 2]
        out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        out += b[None, :, None, None]
        return np.where(out > 0, out, 0.05 * out)

    def embed(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or x.shape[3] != 3:
            raise ConfigurationError(f"feature embedding expects NHWC RGB batch, got shape {x.shape}")
        x = x.transpose(0, 3, 1, 2)
        feats = []
        for w, b in self.layers:
            x = self._conv_s2(x, w, b)
            feats.append(x.mean(axis=(2, 3)))
        return np.concatenate(feats, axis=1)  # (N, 8+16+32)


_embedder: _FeatureEmbedder | None = None


def _get_embedder() -> _FeatureEmbedder:
    global _embedder
    if _embedder is None:
        _embedder = _FeatureEmbedder()
    return _embedder


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def feature_distance(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of random-feature embeddings."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ConfigurationError("feature_distance requires two non-empty image sets")
    emb = _get_embedder()
    fa = emb.embed(a)
    fb = emb.embed(b)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    dim = fa.shape[1]
    eye = np.eye(dim) * 1e-6
    cov_a = np.cov(fa, rowvar=False, ddof=0) + eye if len(fa) > 1 else eye.copy()
    cov_b = np.cov(fb, rowvar=False, ddof=0) + eye if len(fb) > 1 else eye.copy()
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(val, 0.0)


# ------------------------------------------------------------- bit accuracy
def bit_accuracy(expected: np.ndarray, actual: np.ndarray) -> float:
    e = np.asarray(expected).reshape(-1)
    a = np.asarray(actual).reshape(-1)
    if e.shape != a.shape:
        raise ConfigurationError(f"bit_accuracy length mismatch: {e.size} vs {a.size}")
    if e.size == 0:
        raise ConfigurationError("bit_accuracy needs at least one bit")
    return float(np.mean(e.astype(np.uint8) == a.astype(np.uint8)))


# --------------------------------------------------------------- aggregation
def evaluate_condition(
    condition: str,
    outputs: np.ndarray,
    references: np.ndarray,
) -> MetricsReport:
    """Mean per-image PSNR/SSIM plus FD-proxy between the two sets."""
    outputs = np.asarray(outputs, dtype=np.float32)
    references = np.asarray(references, dtype=np.float32)
    if outputs.shape != references.shape:
        raise ConfigurationError(f"condition {condition}: shape mismatch {outputs.shape} vs {references.shape}")
    ps = float(np.mean([psnr(o, r) for o, r in zip(outputs, references)]))
    ss = float(np.mean([ssim(o, r) for o, r in zip(outputs, references)]))
    fd = feature_distance(outputs, references)
    return MetricsReport(condition=condition, psnr=ps, ssim=ss, feature_distance=fd, sample_count=len(outputs))
