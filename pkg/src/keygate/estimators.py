"""Estimator-style wrappers around the training pipeline.

`LatentCoder` behaves like a transformer: fit learns the reference
autoencoder, transform maps image rows to latent rows, inverse_transform
maps them back, score reports reconstruction PSNR.  `KeyGatedEstimator`
is a meta-estimator that fits the key-gated decoder on top of a fitted
coder.  Rows or HWC stacks are both accepted; rows are flattened
image_size*image_size*3 vectors in [0, 1].

The CLI drives the same training functions directly; these wrappers exist
for composition with pipeline tooling and for notebook use.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigurationError
from .keys import FuserKey, generate_key
from .model import ArchConfig, StructureConfig
from .training import TrainHParams, train_gated, train_reference


def _as_image_stack(X: np.ndarray, image_size: int) -> np.ndarray:
    """Accept (n, size, size, 3) stacks or (n, size*size*3) rows."""
    arr = check_array(X, allow_nd=True, dtype=np.float32)
    flat = image_size * image_size * 3
    if arr.ndim == 2:
        if arr.shape[1] != flat:
            raise ConfigurationError(f"expected rows of {flat} values, got {arr.shape[1]}")
        arr = arr.reshape(-1, image_size, image_size, 3)
    elif arr.ndim != 4 or arr.shape[1:] != (image_size, image_size, 3):
        raise ConfigurationError(f"expected (n, {image_size}, {image_size}, 3) images, got {arr.shape}")
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        raise ConfigurationError("image values must lie in [0, 1]")
    return np.clip(arr, 0.0, 1.0)


class LatentCoder(TransformerMixin, BaseEstimator):
    """Reference autoencoder with a fit/transform surface.

    transform returns flattened latent rows; inverse_transform returns
    flattened image rows, so the coder chains with standard pipeline steps.
    """

    def __init__(
        self,
        image_size: int = 32,
        latent_channels: int = 4,
        steps: int = 300,
        learning_rate: float = 1e-3,
        batch_size: int = 16,
        cycle_weight: float = 0.0,
        moment_weight: float = 0.0,
        seed: int = 0,
    ):
        self.image_size = image_size
        self.latent_channels = latent_channels
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.cycle_weight = cycle_weight
        self.moment_weight = moment_weight
        self.seed = seed

    def _arch(self) -> ArchConfig:
        return ArchConfig(image_size=self.image_size, latent_channels=self.latent_channels)

    def fit(self, X, y=None) -> "LatentCoder":
        images = _as_image_stack(X, self.image_size)
        hp = TrainHParams(
            learning_rate=self.learning_rate,
            steps=self.steps,
            batch_size=min(self.batch_size, len(images)),
            seed=self.seed,
            cycle_weight=self.cycle_weight,
            moment_weight=self.moment_weight,
        )
        self.model_, self.report_ = train_reference(images, hp, arch=self._arch())
        self.n_features_in_ = self.image_size * self.image_size * 3
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = _as_image_stack(X, self.image_size)
        latents = self.model_.encode_np(images)
        return latents.reshape(len(latents), -1)

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "model_")
        latents = check_array(Z, dtype=np.float32).reshape((-1,) + self.model_.arch.latent_shape)
        images = self.model_.decode_np(latents)
        return images.reshape(len(images), -1)

    def score(self, X, y=None) -> float:
        """Mean reconstruction PSNR (dB) over X."""
        from .metrics import psnr

        check_is_fitted(self, "model_")
        images = _as_image_stack(X, self.image_size)
        recon = self.model_.reconstruct_np(images)
        return float(np.mean([psnr(a, b) for a, b in zip(images, recon)]))


class KeyGatedEstimator(BaseEstimator):
    """Key-gated decoder fit on top of a fitted LatentCoder.

    `key_hex=None` generates a key from `seed`; read it back from
    `key_hex_` after fit.  decode() accepts latent rows and an optional
    override key, so wrong-key behaviour is one call away.
    """

    def __init__(
        self,
        coder: LatentCoder | None = None,
        key_hex: str | None = None,
        m: int = 2,
        n: int = 1,
        steps: int = 400,
        learning_rate: float = 2e-4,
        batch_size: int = 8,
        lambda_repulsion: float = 0.1,
        seed: int = 0,
    ):
        self.coder = coder
        self.key_hex = key_hex
        self.m = m
        self.n = n
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lambda_repulsion = lambda_repulsion
        self.seed = seed

    def fit(self, X, y=None) -> "KeyGatedEstimator":
        if self.coder is None or not hasattr(self.coder, "model_"):
            raise ConfigurationError("KeyGatedEstimator needs a fitted LatentCoder as `coder`")
        images = _as_image_stack(X, self.coder.image_size)
        key = generate_key(self.seed) if self.key_hex is None else FuserKey.from_hex(self.key_hex)
        hp = TrainHParams(
            learning_rate=self.learning_rate,
            steps=self.steps,
            batch_size=min(self.batch_size, len(images)),
            lambda_repulsion=self.lambda_repulsion,
            seed=self.seed,
        )
        config = StructureConfig(m=self.m, n=self.n)
        self.model_, self.report_ = train_gated(self.coder.model_, config, key, images, hp)
        self.key_hex_ = key.to_hex()
        self.n_features_in_ = int(np.prod(self.coder.model_.arch.latent_shape))
        return self

    def decode(self, Z, key: FuserKey | str | None = None) -> np.ndarray:
        """Decode latent rows to image rows with the fitted (or given) key."""
        check_is_fitted(self, "model_")
        latents = check_array(Z, dtype=np.float32).reshape((-1,) + self.model_.reference.arch.latent_shape)
        if key is None:
            key = FuserKey.from_hex(self.key_hex_)
        elif isinstance(key, str):
            key = FuserKey.from_hex(key)
        images = self.model_.decode_np(latents, key=key).images
        return images.reshape(len(images), -1)

    def predict(self, Z) -> np.ndarray:
        return self.decode(Z)

    def score(self, Z, y=None) -> float:
        """Mean PSNR (dB) of keyed decodes against the reference decoder."""
        from .metrics import psnr

        check_is_fitted(self, "model_")
        latents = check_array(Z, dtype=np.float32).reshape((-1,) + self.model_.reference.arch.latent_shape)
        ref = self.model_.reference.decode_np(latents)
        out = self.model_.decode_np(latents, key=FuserKey.from_hex(self.key_hex_)).images
        return float(np.mean([psnr(a, b) for a, b in zip(out, ref)]))
