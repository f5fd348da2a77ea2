"""Deterministic synthetic image corpus: gradients, flat shapes, soft textures.

Each image is generated from its own seed stream derived from
``(spec.seed, index)``, so any prefix of the dataset is stable no matter how
many images are requested.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigurationError
from .imageops import resize_bilinear

FAMILIES = ("gradient", "shapes", "texture")


@dataclass(frozen=True)
class DatasetSpec:
    count: int
    seed: int = 0
    height: int = 32
    width: int = 32
    channels: int = 3
    mix: tuple[float, float, float] = (0.34, 0.33, 0.33)

    def validate(self) -> "DatasetSpec":
        if self.count < 1:
            raise ConfigurationError(f"dataset count must be >= 1, got {self.count}")
        if self.height < 8 or self.width < 8:
            raise ConfigurationError(f"image size must be at least 8x8, got {self.height}x{self.width}")
        if self.channels != 3:
            raise ConfigurationError(f"only 3-channel images are supported, got {self.channels}")
        if len(self.mix) != len(FAMILIES):
            raise ConfigurationError(f"mix must have {len(FAMILIES)} entries, got {len(self.mix)}")
        if any(p < 0 for p in self.mix):
            raise ConfigurationError(f"mix proportions must be >= 0, got {self.mix}")
        if abs(sum(self.mix) - 1.0) > 1e-6:
            raise ConfigurationError(f"mix proportions must sum to 1, got sum={sum(self.mix)!r}")
        return self


def _gradient_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.95, size=3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    t = xx * np.cos(theta) + yy * np.sin(theta)
    if rng.random() < 0.3:
        t = np.sqrt(xx**2 + yy**2) * rng.uniform(0.8, 1.4)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    t = t ** rng.uniform(0.6, 1.6)
    return c0[None, None, :] + (c1 - c0)[None, None, :] * t[:, :, None]


def _shapes_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = np.tile(rng.uniform(0.05, 0.95, size=3)[None, None, :], (h, w, 1))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        if rng.random() < 0.5:
            r = rng.uniform(0.1, 0.3) * min(h, w)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            ry, rx = rng.uniform(0.08, 0.28) * h, rng.uniform(0.08, 0.28) * w
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[mask] = color
    return img


def _texture_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    gh, gw = int(rng.integers(5, 10)), int(rng.integers(5, 10))
    field = rng.random((gh, gw, 3))
    img = resize_bilinear(field.astype(np.float64), h, w)
    lo = rng.uniform(0.0, 0.35)
    hi = rng.uniform(0.65, 1.0)
    span = img.max() - img.min()
    return lo + (img - img.min()) / max(span, 1e-9) * (hi - lo)


_GENERATORS = {
    "gradient": _gradient_image,
    "shapes": _shapes_image,
    "texture": _texture_image,
}


def generate_image(spec: DatasetSpec, index: int) -> np.ndarray:
    """One HWC float32 image; stable under changes to spec.count."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, index))))
    family = rng.choice(len(FAMILIES), p=np.asarray(spec.mix, dtype=np.float64) / sum(spec.mix))
    img = _GENERATORS[FAMILIES[family]](rng, spec.height, spec.width)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(spec: DatasetSpec) -> np.ndarray:
    """(N, H, W, C) float32 batch in [0, 1]."""
    spec.validate()
    return np.stack([generate_image(spec, i) for i in range(spec.count)])


def split(images: np.ndarray, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle then a disjoint train/eval cut covering every image."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(images)
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * train_fraction))
    cut = min(max(cut, 1), n - 1)
    return images[order[:cut]], images[order[cut:]]
