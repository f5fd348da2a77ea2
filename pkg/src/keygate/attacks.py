"""The adversary toolbox: image post-processing, wrong keys, structure removal,
brute-force structure search, and filter-based restoration.

All image attacks take and return HWC float images in [0, 1], keep the
canvas size fixed (crop zero-fills, resize scales back up), and are
deterministic given the AttackSpec seed.  Neutral parameters (brightness 1.0,
resize 1.0, crop 1.0) are exact no-ops.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .imageops import check_image, clip01, gaussian_blur_image, resize_bilinear
from .keys import RemovalHypothesis, enumerate_removals, combination_count
from .metrics import MetricsReport, evaluate_condition
from .model import GatedDecoder, ReferenceAutoencoder
from .keys import FuserKey, sample_wrong_key

ATTACK_KINDS = (
    "jpeg_proxy",
    "crop",
    "drop",
    "gaussian_blur",
    "median_filter",
    "gaussian_noise",
    "salt_pepper",
    "resize",
    "brightness",
)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> "AttackSpec":
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}; valid: {ATTACK_KINDS}")
        return self


def default_attack_suite(seed: int = 0) -> list[AttackSpec]:
    """The nine standard attacks at their standard strengths."""
    return [
        AttackSpec("jpeg_proxy", {"quality": 75}, seed),
        AttackSpec("crop", {"fraction": 0.5}, seed),
        AttackSpec("drop", {"fraction": 0.3}, seed),
        AttackSpec("gaussian_blur", {"sigma": 2.0}, seed),
        AttackSpec("median_filter", {"ksize": 5}, seed),
        AttackSpec("gaussian_noise", {"sigma": 0.1}, seed),
        AttackSpec("salt_pepper", {"prob": 0.1}, seed),
        AttackSpec("resize", {"scale": 0.5}, seed),
        AttackSpec("brightness", {"factor": 2.0}, seed),
    ]


# ------------------------------------------------------------ image attacks
_DCT8 = None


def _dct_matrix() -> np.ndarray:
    global _DCT8
    if _DCT8 is None:
        n = 8
        mat = np.zeros((n, n), dtype=np.float64)
        for k in range(n):
            for i in range(n):
                mat[k, i] = np.cos(np.pi * k * (2 * i + 1) / (2 * n))
        mat *= np.sqrt(2.0 / n)
        mat[0] *= np.sqrt(0.5)
        _DCT8 = mat
    return _DCT8


# Standard JPEG luminance quantization table.
_JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _quality_scaled_table(quality: int) -> np.ndarray:
    if quality < 50:
        scale = 5000.0 / quality
    else:
        scale = 200.0 - 2.0 * quality
    table = np.floor((_JPEG_LUMA_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _blockify(chan: np.ndarray) -> tuple[np.ndarray, int, int]:
    h, w = chan.shape
    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    padded = np.pad(chan, ((0, ph), (0, pw)), mode="edge")
    hb, wb = padded.shape[0] // 8, padded.shape[1] // 8
    blocks = padded.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)
    return blocks, hb, wb


def _unblockify(blocks: np.ndarray, hb: int, wb: int, h: int, w: int) -> np.ndarray:
    full = blocks.reshape(hb, wb, 8, 8).transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8)
    return full[:h, :w]


def dct_blockwise(chan: np.ndarray) -> np.ndarray:
    """Forward 8x8 DCT-II of one channel (values centered around 0)."""
    blocks, hb, wb = _blockify(chan)
    mat = _dct_matrix()
    out = np.einsum("ki,nij,lj->nkl", mat, blocks, mat)
    return _unblockify(out, hb, wb, chan.shape[0], chan.shape[1])


def idct_blockwise(coeffs: np.ndarray) -> np.ndarray:
    blocks, hb, wb = _blockify(coeffs)
    mat = _dct_matrix()
    out = np.einsum("ki,nkl,lj->nij", mat, blocks, mat)
    return _unblockify(out, hb, wb, coeffs.shape[0], coeffs.shape[1])


def jpeg_proxy(image: np.ndarray, quality: int) -> np.ndarray:
    """Blockwise-DCT quantization at a JPEG-style quality factor.

    Quantizes every channel with the luminance table (no chroma subsampling
    or entropy coding; those do not change the frequency-domain character of
    the degradation).
    """
    if not 1 <= int(quality) <= 100:
        raise ConfigurationError(f"jpeg quality must be in 1..100, got {quality}")
    arr = check_image(image).astype(np.float64)
    table = _quality_scaled_table(int(quality))
    mat = _dct_matrix()
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        chan = arr[:, :, c] * 255.0 - 128.0
        blocks, hb, wb = _blockify(chan)
        coeffs = np.einsum("ki,nij,lj->nkl", mat, blocks, mat)
        coeffs = np.round(coeffs / table) * table
        rec = np.einsum("ki,nkl,lj->nij", mat, coeffs, mat)
        out[:, :, c] = (_unblockify(rec, hb, wb, chan.shape[0], chan.shape[1]) + 128.0) / 255.0
    return clip01(out).astype(image.dtype)


def crop_attack(image: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Keep a random window holding `fraction` of the area; zero-fill the rest."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"crop fraction must be in (0, 1], got {fraction}")
    arr = check_image(image)
    if fraction == 1.0:
        return arr.copy()
    h, w = arr.shape[:2]
    side = np.sqrt(fraction)
    kh = max(1, int(round(h * side)))
    kw = max(1, int(round(w * side)))
    rng = np.random.default_rng(seed)
    y0 = int(rng.integers(0, h - kh + 1))
    x0 = int(rng.integers(0, w - kw + 1))
    out = np.zeros_like(arr)
    out[y0 : y0 + kh, x0 : x0 + kw] = arr[y0 : y0 + kh, x0 : x0 + kw]
    return out


def drop_attack(image: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Zero a random `fraction` of pixels (all channels together)."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError(f"drop fraction must be in [0, 1), got {fraction}")
    arr = check_image(image)
    if fraction == 0.0:
        return arr.copy()
    rng = np.random.default_rng(seed)
    keep = rng.random(arr.shape[:2]) >= fraction
    return arr * keep[:, :, None].astype(arr.dtype)


def gaussian_blur_attack(image: np.ndarray, sigma: float) -> np.ndarray:
    return clip01(gaussian_blur_image(image, sigma)).astype(image.dtype)


def median_filter_attack(image: np.ndarray, ksize: int) -> np.ndarray:
    if ksize < 1 or ksize % 2 == 0:
        raise ConfigurationError(f"median kernel must be odd and >= 1, got {ksize}")
    arr = check_image(image)
    if ksize == 1:
        return arr.copy()
    r = ksize // 2
    padded = np.pad(arr, ((r, r), (r, r), (0, 0)), mode="reflect")
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        win = np.lib.stride_tricks.sliding_window_view(padded[:, :, c], (ksize, ksize))
        out[:, :, c] = np.median(win, axis=(2, 3))
    return out


def gaussian_noise_attack(image: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    if sigma < 0:
        raise ConfigurationError(f"noise sigma must be >= 0, got {sigma}")
    arr = check_image(image)
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=arr.shape)
    return clip01(arr + noise).astype(arr.dtype)


def salt_pepper_attack(image: np.ndarray, prob: float, seed: int = 0) -> np.ndarray:
    if not 0.0 <= prob <= 1.0:
        raise ConfigurationError(f"salt-pepper probability must be in [0, 1], got {prob}")
    arr = check_image(image).copy()
    if prob == 0.0:
        return arr
    rng = np.random.default_rng(seed)
    hit = rng.random(arr.shape[:2]) < prob
    salt = rng.random(arr.shape[:2]) < 0.5
    arr[hit & salt] = 1.0
    arr[hit & ~salt] = 0.0
    return arr


def resize_attack(image: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear downscale then upscale back to the original canvas."""
    if not 0.0 < scale <= 1.0:
        raise ConfigurationError(f"resize scale must be in (0, 1], got {scale}")
    arr = check_image(image)
    if scale == 1.0:
        return arr.copy()
    h, w = arr.shape[:2]
    small = resize_bilinear(arr, max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    return clip01(resize_bilinear(small, h, w)).astype(arr.dtype)


def brightness_attack(image: np.ndarray, factor: float) -> np.ndarray:
    if factor <= 0:
        raise ConfigurationError(f"brightness factor must be > 0, got {factor}")
    arr = check_image(image)
    if factor == 1.0:
        return arr.copy()
    return clip01(arr * factor).astype(arr.dtype)


def apply_attack(image: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Dispatch one attack spec; output is clipped and canvas-sized."""
    spec.validate()
    p = spec.params
    if spec.kind == "jpeg_proxy":
        return jpeg_proxy(image, p.get("quality", 75))
    if spec.kind == "crop":
        return crop_attack(image, p.get("fraction", 0.5), spec.seed)
    if spec.kind == "drop":
        return drop_attack(image, p.get("fraction", 0.3), spec.seed)
    if spec.kind == "gaussian_blur":
        return gaussian_blur_attack(image, p.get("sigma", 2.0))
    if spec.kind == "median_filter":
        return median_filter_attack(image, p.get("ksize", 5))
    if spec.kind == "gaussian_noise":
        return gaussian_noise_attack(image, p.get("sigma", 0.1), spec.seed)
    if spec.kind == "salt_pepper":
        return salt_pepper_attack(image, p.get("prob", 0.1), spec.seed)
    if spec.kind == "resize":
        return resize_attack(image, p.get("scale", 0.5))
    if spec.kind == "brightness":
        return brightness_attack(image, p.get("factor", 2.0))
    raise ConfigurationError(f"unknown attack kind {spec.kind!r}")


# ------------------------------------------------------------- model attacks
def _reference_images(reference: ReferenceAutoencoder, latents: np.ndarray) -> np.ndarray:
    return reference.decode_np(latents)


def authorized_eval(gated: GatedDecoder, latents: np.ndarray, key: FuserKey) -> MetricsReport:
    """Quality of correct-key decodes against the reference decoder ("ori")."""
    ref = _reference_images(gated.reference, latents)
    out = gated.decode_np(latents, key=key).images
    return evaluate_condition("ori", out, ref)


def wrong_key_attack(
    gated: GatedDecoder,
    latents: np.ndarray,
    correct_key: FuserKey,
    trials: int = 3,
    seed: int = 0,
) -> MetricsReport:
    """Decode with random wrong keys; metrics averaged over trials."""
    if trials < 1:
        raise ConfigurationError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    ref = _reference_images(gated.reference, latents)
    reports = []
    for _ in range(trials):
        wrong = sample_wrong_key(rng, correct_key)
        out = gated.decode_np(latents, key=wrong).images
        reports.append(evaluate_condition("wrong_key", out, ref))
    return MetricsReport(
        condition="wrong_key",
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        feature_distance=float(np.mean([r.feature_distance for r in reports])),
        sample_count=len(latents) * trials,
    )


def remove_fuser_attack(gated: GatedDecoder, latents: np.ndarray) -> MetricsReport:
    """Decode with every fuser replaced by its pass-through."""
    ref = _reference_images(gated.reference, latents)
    out = gated.decode_np(latents, key=None, use_fusers=False).images
    return evaluate_condition("no_fuser", out, ref)


def partial_removal_attack(
    gated: GatedDecoder,
    hypothesis: RemovalHypothesis,
    latents: np.ndarray,
    key: FuserKey | None = None,
) -> MetricsReport:
    """Strip the layers the hypothesis rejects, then measure against reference.

    Without a key (the keyless attacker) the fusers are also inert.  Raises
    a configuration error for hypotheses that are invalid for this decoder.
    """
    ref = _reference_images(gated.reference, latents)
    out = gated.decode_np(latents, key=key, use_fusers=key is not None, removal=hypothesis).images
    return evaluate_condition("removal", out, ref)


@dataclass(frozen=True)
class TrialRecord:
    hypothesis: RemovalHypothesis
    valid: bool
    psnr: float | None
    ssim: float | None
    seconds: float

    def to_dict(self) -> dict:
        return {
            "hypothesis": self.hypothesis.label(),
            "kind": self.hypothesis.kind,
            "valid": self.valid,
            "psnr_db": None if self.psnr is None else round(self.psnr, 6),
            "ssim": None if self.ssim is None else round(self.ssim, 6),
            "seconds": self.seconds,
        }


def brute_force_search(
    gated: GatedDecoder,
    latents: np.ndarray,
    budget: int,
    seed: int = 0,
    key: FuserKey | None = None,
    reference_images: np.ndarray | None = None,
) -> tuple[RemovalHypothesis | None, list[TrialRecord]]:
    """Try `budget` removal hypotheses sampled without replacement.

    Statically invalid hypotheses still consume budget (the attacker must
    consider them) but are recorded without metrics.  Returns the best
    valid hypothesis by PSNR and the full trace, merged back into
    hypothesis-index order so traces are deterministic and mergeable.
    ``reference_images`` skips the internal reference decode when the
    caller already has it, leaving per-trial cost as the only real work.
    """
    space = enumerate_removals(gated.config.m, gated.config.n)
    total = combination_count(gated.config.m, gated.config.n)
    if not 1 <= budget <= total:
        raise ConfigurationError(f"budget must be in 1..{total}, got {budget}")
    order = np.random.default_rng(seed).permutation(len(space))[:budget]
    if reference_images is None:
        ref = _reference_images(gated.reference, latents)
    else:
        ref = np.asarray(reference_images, dtype=np.float32)
    indexed: list[tuple[int, TrialRecord]] = []
    best: tuple[float, RemovalHypothesis] | None = None
    for i in order:
        hyp = space[int(i)]
        t0 = time.perf_counter()
        try:
            gated.resolve_hypothesis(hyp)
        except ConfigurationError:
            indexed.append((int(i), TrialRecord(hyp, False, None, None, time.perf_counter() - t0)))
            continue
        out = gated.decode_np(latents, key=key, use_fusers=key is not None, removal=hyp).images
        report = evaluate_condition("removal", out, ref)
        dt = time.perf_counter() - t0
        indexed.append((int(i), TrialRecord(hyp, True, report.psnr, report.ssim, dt)))
        if best is None or report.psnr > best[0]:
            best = (report.psnr, hyp)
    indexed.sort(key=lambda pair: pair[0])
    return (best[1] if best else None), [rec for _, rec in indexed]


# ---------------------------------------------------------------- restoration
RESTORE_MEDIAN_K = 3
RESTORE_UNSHARP_SIGMA = 1.0
RESTORE_UNSHARP_AMOUNT = 0.6


def restoration_attack(degraded: np.ndarray) -> np.ndarray:
    """Median denoise then unsharp masking, fixed parameters, deterministic."""
    arr = check_image(degraded)
    den = median_filter_attack(arr, RESTORE_MEDIAN_K)
    blurred = gaussian_blur_image(den, RESTORE_UNSHARP_SIGMA)
    return clip01(den + RESTORE_UNSHARP_AMOUNT * (den - blurred)).astype(arr.dtype)


def restoration_eval(outputs: np.ndarray, references: np.ndarray, condition: str = "restored") -> MetricsReport:
    restored = np.stack([restoration_attack(img) for img in outputs])
    return evaluate_condition(condition, restored, references)
