"""Two-stage training: the reference autoencoder, then the key-gated decoder.

Stage 0 trains the autoencoder on reconstruction (MAE + a small random-
feature perceptual term).  Two optional extras make the latent space usable
as a watermark carrier: a cycle-consistency term ``E(aug(D(z))) ~ z`` on
Gaussian latents, with mild differentiable corruptions standing in for the
pixel-space attack suite, and a moment penalty keeping encoded latents near
zero mean / unit variance.  Cropping is deliberately never part of the
augmentation mix.

Stage 1 freezes the reference, builds the gated decoder, and minimizes
``lambda_mae * MAE + lambda_perceptual * perceptual`` between the gated
output (correct key) and the reference output on the same latents.  With
``lambda_repulsion > 0``, hinge terms additionally push the wrong-key,
fuser-less, and partially-removed decodes away from the reference output;
without them, nothing stops the optimizer from ignoring the key entirely,
since every added layer starts as an exact identity.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import metrics as metrics_mod
from . import tensor as T
from .errors import ConfigurationError, TrainingError
from .imageops import gaussian_kernel1d
from .keys import FuserKey, enumerate_removals, sample_wrong_key
from .model import (
    ArchConfig,
    GatedDecoder,
    ReferenceAutoencoder,
    StructureConfig,
    build_gated,
    build_reference,
    check_latents,
)
from .nn import Module, Conv2d
from .optim import AdamW
from .tensor import Tensor

PERCEPTUAL_SEED = 7713


@dataclass(frozen=True)
class TrainHParams:
    learning_rate: float = 5e-5
    steps: int = 1000
    batch_size: int = 8
    lambda_mae: float = 1.0
    lambda_perceptual: float = 1.0
    lambda_repulsion: float = 0.0
    clip_norm: float | None = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    # stage-0 extras
    cycle_weight: float = 0.0
    moment_weight: float = 0.0
    # stage-1 extras
    margin_wrong: float = 0.05
    band_wrong: float = 0.08
    margin_absent: float = 0.12
    gaussian_fraction: float = 0.5

    def validate(self) -> "TrainHParams":
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError(f"steps and batch_size must be >= 1, got {self.steps}, {self.batch_size}")
        for name in ("lambda_mae", "lambda_perceptual", "lambda_repulsion", "cycle_weight", "moment_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 < self.margin_wrong < self.band_wrong < self.margin_absent:
            raise ConfigurationError(
                "repulsion margins must satisfy 0 < margin_wrong < band_wrong < margin_absent, "
                f"got {self.margin_wrong}, {self.band_wrong}, {self.margin_absent}"
            )
        if not 0.0 <= self.gaussian_fraction <= 1.0:
            raise ConfigurationError(f"gaussian_fraction must be in [0, 1], got {self.gaussian_fraction}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError(f"clip_norm must be > 0 or None, got {self.clip_norm}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    total: float
    mae: float
    perceptual: float
    repulsion: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"step": self.step, "total": self.total, "mae": self.mae,
             "perceptual": self.perceptual, "repulsion": self.repulsion}
        d.update(self.extras)
        return d


@dataclass
class TrainReport:
    stage: str
    hparams: dict
    steps: list[StepRecord]
    final_psnr: float
    final_ssim: float
    param_count: int
    trainable_count: int
    wall_time_s: float

    def deterministic_dict(self) -> dict:
        """Everything except wall time; equal for equal seeds and configs."""
        return {
            "stage": self.stage,
            "hparams": self.hparams,
            "steps": [s.to_dict() for s in self.steps],
            "final_psnr": self.final_psnr,
            "final_ssim": self.final_ssim,
            "param_count": self.param_count,
            "trainable_count": self.trainable_count,
        }

    def summary_dict(self) -> dict:
        d = self.deterministic_dict()
        del d["steps"]
        d["num_steps"] = len(self.steps)
        d["final_total_loss"] = self.steps[-1].total if self.steps else None
        d["wall_time_s"] = self.wall_time_s
        return d


# ------------------------------------------------------------------- losses
def mae_t(a: Tensor, b: Tensor) -> Tensor:
    return T.absolute(a - b).mean()


def mse_t(a: Tensor, b: Tensor) -> Tensor:
    return ((a - b) ** 2.0).mean()


class PerceptualProxy(Module):
    """Three frozen random conv layers; distance is the mean MSE of their maps.

    Random features are a crude but honest stand-in for a pretrained
    perceptual network: they mix channels and neighborhoods, so structural
    errors cost more than independent pixel noise.
    """

    def __init__(self, seed: int = PERCEPTUAL_SEED):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(3, 8, stride=2, rng=rng)
        self.conv2 = Conv2d(8, 16, stride=2, rng=rng)
        self.conv3 = Conv2d(16, 32, stride=2, rng=rng)
        self.freeze_()

    def features(self, x: Tensor) -> list[Tensor]:
        f1 = T.silu(self.conv1(x))
        f2 = T.silu(self.conv2(f1))
        f3 = T.silu(self.conv3(f2))
        return [f1, f2, f3]

    def distance(self, a: Tensor, b: Tensor) -> Tensor:
        fa = self.features(a)
        fb = self.features(b)
        total = mse_t(fa[0], fb[0])
        for xa, xb in zip(fa[1:], fb[1:]):
            total = total + mse_t(xa, xb)
        return total * (1.0 / len(fa))


_default_proxy: PerceptualProxy | None = None


def _proxy() -> PerceptualProxy:
    global _default_proxy
    if _default_proxy is None:
        _default_proxy = PerceptualProxy()
    return _default_proxy


def _to_nchw_tensor(images: np.ndarray) -> Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[3] not in (1, 3):
        raise ConfigurationError(f"expected NHWC image batch, got shape {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def mae_loss(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute error between two image batches (or single images)."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ConfigurationError(f"mae_loss shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def perceptual_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Random-feature perceptual distance between two NHWC image batches."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.shape != b.shape:
        raise ConfigurationError(f"perceptual_distance shape mismatch: {a.shape} vs {b.shape}")
    return _proxy().distance(_to_nchw_tensor(a), _to_nchw_tensor(b)).item()


def _hinge(out: Tensor, target: Tensor, margin: float) -> Tensor:
    return T.relu(margin - mae_t(out, target))


def _band_hinge(out: Tensor, target: Tensor, lo: float, hi: float) -> Tensor:
    # Corridor, not one-sided: without the ceiling the wrong-key error has no
    # restoring force and drifts past the absence margin, inverting the
    # wrong-key > no-fuser quality ordering.
    d = mae_t(out, target)
    return T.relu(lo - d) + T.relu(d - hi)


def repulsion_loss(
    gated: GatedDecoder,
    latents: np.ndarray,
    correct_key: FuserKey,
    seed: int,
    margin: float = 0.05,
    samples: int = 2,
) -> Tensor:
    """Hinge pushing wrong-key decodes at least `margin` MAE from the reference.

    Wrong keys are sampled uniformly and always differ from the correct key.
    On an untrained gated decoder every output equals the reference, so the
    loss evaluates to exactly `margin`.
    """
    if samples < 1:
        raise ConfigurationError(f"samples must be >= 1, got {samples}")
    rng = np.random.default_rng(seed)
    z = Tensor(check_latents(latents, gated.arch))
    target = gated.reference.decoder(z)
    total = None
    for _ in range(samples):
        wrong = sample_wrong_key(rng, correct_key)
        out = gated.forward_tensor(z, Tensor(wrong.to_bipolar().reshape(1, -1)))
        term = _hinge(out, target, margin)
        total = term if total is None else total + term
    return total * (1.0 / samples)


# ------------------------------------------------- differentiable corruptions
_BLUR_CACHE: dict[tuple[float, int, str], np.ndarray] = {}


def _blur_weight(sigma: float, channels: int, dtype: str) -> np.ndarray:
    key = (sigma, channels, dtype)
    if key not in _BLUR_CACHE:
        k1 = gaussian_kernel1d(sigma, radius=min(int(np.ceil(3.0 * sigma)), 5))
        k2 = np.outer(k1, k1)
        _BLUR_CACHE[key] = np.repeat(k2[None, :, :], channels, axis=0).astype(dtype)
    return _BLUR_CACHE[key]


def blur_t(x: Tensor, sigma: float) -> Tensor:
    w = _blur_weight(sigma, x.data.shape[1], str(x.data.dtype))
    pad = (w.shape[1] - 1) // 2
    return T.depthwise_conv2d(x, Tensor(w), padding=pad)


def _augment(y: Tensor, step: int, rng: np.random.Generator) -> Tensor:
    """Cycle through mild differentiable corruptions of a decoded batch.

    The mix mirrors the pixel-space attack suite minus cropping (kept out on
    purpose: the latent watermark's worst case must stay the crop) and minus
    the non-differentiable median filter, which blurring approximates.
    """
    n, c, h, w = y.data.shape
    mode = step % 10
    if mode in (1, 6):
        return blur_t(y, 1.0)
    if mode in (2, 7, 9):
        return blur_t(y, 2.0)
    if mode == 3:
        noise = rng.normal(0.0, rng.choice([0.05, 0.1]), size=y.data.shape).astype(np.float32)
        return y + Tensor(noise)
    if mode == 4:
        keep = (rng.random((n, 1, h, w)) >= 0.2).astype(np.float32)
        return y * Tensor(keep)
    if mode == 5:
        hit = rng.random((n, 1, h, w)) < 0.05
        salt = hit & (rng.random((n, 1, h, w)) < 0.5)
        keep = (~hit).astype(np.float32)
        return y * Tensor(keep) + Tensor(salt.astype(np.float32))
    if mode == 8:
        if h % 2 == 0 and w % 2 == 0:
            return T.upsample_nearest2x(T.avgpool2x(y))
        return y
    if mode == 0 and (step // 10) % 2 == 1:
        return y * float(rng.choice([0.75, 1.3]))
    return y


def _batch_indices(rng: np.random.Generator, count: int, batch: int, state: dict) -> np.ndarray:
    """Epoch-permuted batch sampler; always yields full batches."""
    order = state.get("order")
    ptr = state.get("ptr", 0)
    if order is None or ptr + batch > len(order):
        order = rng.permutation(count)
        while len(order) < batch:
            order = np.concatenate([order, rng.permutation(count)])
        ptr = 0
    state["order"], state["ptr"] = order, ptr + batch
    return order[ptr : ptr + batch]


def _check_finite(value: float, step: int, stage: str) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{stage} loss became non-finite at step {step}")


def _final_metrics(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    ps = [metrics_mod.psnr(o, t) for o, t in zip(outputs, targets)]
    ss = [metrics_mod.ssim(o, t) for o, t in zip(outputs, targets)]
    return float(np.mean(ps)), float(np.mean(ss))


# ------------------------------------------------------------------- stage 0
def train_reference(
    dataset: np.ndarray,
    hparams: TrainHParams,
    eval_images: np.ndarray | None = None,
    arch: ArchConfig | None = None,
) -> tuple[ReferenceAutoencoder, TrainReport]:
    """Train the reference autoencoder; returns it frozen, plus the report."""
    hparams.validate()
    images = np.asarray(dataset, dtype=np.float32)
    if images.ndim != 4 or len(images) < 1:
        raise ConfigurationError(f"dataset must be a non-empty NHWC batch, got shape {images.shape}")
    t0 = time.perf_counter()
    model = build_reference(hparams.seed, arch)
    batch = min(hparams.batch_size, len(images))
    opt = AdamW(
        model.parameters(),
        lr=hparams.learning_rate,
        weight_decay=hparams.weight_decay,
        clip_norm=hparams.clip_norm,
    )
    rng = np.random.default_rng(np.random.SeedSequence((hparams.seed, 11)))
    proxy = _proxy() if hparams.lambda_perceptual > 0 else None
    latent_shape = model.arch.latent_shape
    records: list[StepRecord] = []
    state: dict = {}

    for step in range(hparams.steps):
        idx = _batch_indices(rng, len(images), batch, state)
        x = _to_nchw_tensor(images[idx])
        z = model.encoder(x)
        xhat = model.decoder(z)
        mae = mae_t(xhat, x)
        loss = hparams.lambda_mae * mae
        perc_val = 0.0
        if proxy is not None:
            perc = proxy.distance(xhat, x)
            loss = loss + hparams.lambda_perceptual * perc
            perc_val = perc.item()
        extras: dict = {}
        if hparams.cycle_weight > 0:
            zc_np = rng.standard_normal((batch,) + latent_shape).astype(np.float32)
            zc = Tensor(zc_np)
            y = model.decoder(zc)
            zhat = model.encoder(_augment(y, step, rng))
            cyc = mse_t(zhat, zc)
            loss = loss + hparams.cycle_weight * cyc
            extras["cycle"] = cyc.item()
        if hparams.moment_weight > 0:
            mu = z.mean()
            sd = T.sqrt(((z - mu) ** 2.0).mean() + 1e-6)
            mom = mu ** 2.0 + (sd - 1.0) ** 2.0
            loss = loss + hparams.moment_weight * mom
            extras["moment"] = mom.item()
        total = loss.item()
        _check_finite(total, step, "stage-0")
        opt.zero_grad()
        loss.backward()
        opt.step()
        records.append(StepRecord(step=step, total=total, mae=mae.item(), perceptual=perc_val, repulsion=0.0, extras=extras))

    model.freeze_()
    held_out = images if eval_images is None else np.asarray(eval_images, dtype=np.float32)
    held_out = held_out[: min(len(held_out), 128)]
    recon = model.reconstruct_np(held_out)
    final_psnr, final_ssim = _final_metrics(recon, held_out)
    report = TrainReport(
        stage="reference",
        hparams=hparams.to_dict(),
        steps=records,
        final_psnr=final_psnr,
        final_ssim=final_ssim,
        param_count=model.parameter_count(),
        trainable_count=0,
        wall_time_s=time.perf_counter() - t0,
    )
    return model, report


# ------------------------------------------------------------------- stage 1
def train_gated(
    reference: ReferenceAutoencoder,
    config: StructureConfig,
    key: FuserKey,
    dataset: np.ndarray,
    hparams: TrainHParams,
    eval_latents: np.ndarray | None = None,
) -> tuple[GatedDecoder, TrainReport]:
    """Fine-tune the gated decoder against the frozen reference.

    Latent batches mix encodings of the dataset with fresh standard-normal
    draws (``gaussian_fraction``), since watermarked generation feeds the
    decoder Gaussian latents, not encoder outputs.
    """
    hparams.validate()
    if not all(p.frozen for p in reference.parameters()):
        raise TrainingError("reference parameters must all be frozen before stage-1 training")
    images = np.asarray(dataset, dtype=np.float32)
    if images.ndim != 4 or len(images) < 1:
        raise ConfigurationError(f"dataset must be a non-empty NHWC batch, got shape {images.shape}")
    t0 = time.perf_counter()
    gated = build_gated(reference, config, seed=hparams.seed)
    gated.register_key(key, salt_seed=hparams.seed)
    opt = AdamW(
        gated.parameters(),
        lr=hparams.learning_rate,
        weight_decay=hparams.weight_decay,
        clip_norm=hparams.clip_norm,
    )
    if not opt.params:
        raise TrainingError("gated decoder has no trainable parameters (no fusers and m=n=0?)")
    rng = np.random.default_rng(np.random.SeedSequence((hparams.seed, 21)))
    key_rng = np.random.default_rng(np.random.SeedSequence((hparams.seed, 22)))
    proxy = _proxy() if hparams.lambda_perceptual > 0 else None
    pool = reference.encode_np(images)
    latent_shape = reference.arch.latent_shape
    key_vec = Tensor(key.to_bipolar().reshape(1, -1))

    strict_hyps = []
    for hyp in enumerate_removals(config.m, config.n):
        if not hyp.removes_anything(config.m, config.n):
            continue
        try:
            gated.resolve_hypothesis(hyp)
        except ConfigurationError:
            continue
        strict_hyps.append(hyp)

    batch = min(hparams.batch_size, len(pool))
    n_gauss = int(round(batch * hparams.gaussian_fraction))
    records: list[StepRecord] = []
    state: dict = {}

    for step in range(hparams.steps):
        idx = _batch_indices(rng, len(pool), batch, state)
        z_np = pool[idx].copy()
        if n_gauss:
            z_np[:n_gauss] = rng.standard_normal((n_gauss,) + latent_shape).astype(np.float32)
        z = Tensor(z_np)
        target = reference.decoder(z)  # frozen: builds no graph
        out = gated.forward_tensor(z, key_vec)
        mae = mae_t(out, target)
        loss = hparams.lambda_mae * mae
        perc_val = 0.0
        if proxy is not None:
            perc = proxy.distance(out, target)
            loss = loss + hparams.lambda_perceptual * perc
            perc_val = perc.item()
        rep_val = 0.0
        if hparams.lambda_repulsion > 0:
            wrong = sample_wrong_key(key_rng, key)
            out_wrong = gated.forward_tensor(z, Tensor(wrong.to_bipolar().reshape(1, -1)))
            rep = _band_hinge(out_wrong, target, hparams.margin_wrong, hparams.band_wrong)
            if step % 2 == 0 or not strict_hyps:
                out_absent = gated.forward_tensor(z, None, use_fusers=False)
                rep = rep + _hinge(out_absent, target, hparams.margin_absent)
            else:
                hyp = strict_hyps[int(key_rng.integers(len(strict_hyps)))]
                plan = gated.resolve_hypothesis(hyp)
                out_removed = gated.forward_tensor(z, None, use_fusers=False, plan=plan)
                rep = rep + _hinge(out_removed, target, hparams.margin_absent)
            loss = loss + hparams.lambda_repulsion * rep
            rep_val = rep.item()
        total = loss.item()
        _check_finite(total, step, "stage-1")
        opt.zero_grad()
        loss.backward()
        opt.step()
        records.append(StepRecord(step=step, total=total, mae=mae.item(), perceptual=perc_val, repulsion=rep_val))

    if eval_latents is None:
        eval_latents = pool[: min(len(pool), 64)]
    eval_latents = check_latents(eval_latents, reference.arch)
    out_imgs = gated.decode_np(eval_latents, key=key).images
    ref_imgs = reference.decode_np(eval_latents)
    final_psnr, final_ssim = _final_metrics(out_imgs, ref_imgs)
    report = TrainReport(
        stage="gated",
        hparams=hparams.to_dict(),
        steps=records,
        final_psnr=final_psnr,
        final_ssim=final_ssim,
        param_count=gated.parameter_count(),
        trainable_count=sum(p.data.size for p in gated.added_parameters()),
        wall_time_s=time.perf_counter() - t0,
    )
    return gated, report
