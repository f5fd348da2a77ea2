"""Latent sign watermark: payload bits control latent signs, majority-vote decode.

Each payload bit owns ``r`` latent positions chosen by a secret seeded
permutation.  Embedding draws magnitudes from the half-normal distribution
and sets the sign from the bit (1 -> positive), so with uniform payloads
every latent element is marginally standard normal and the carrier is
statistically indistinguishable from the decoder's native input.  Extraction
re-encodes the image with the frozen reference encoder and majority-votes
the signs at each bit's positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import CapacityError, ConfigurationError
from .metrics import bit_accuracy

DEFAULT_BITS = 32
DEFAULT_REPLICATION = 8


@dataclass(frozen=True)
class WatermarkPayload:
    bits: tuple[int, ...]
    replication: int = DEFAULT_REPLICATION
    seed: int = 0

    def validate(self, latent_elements: int) -> "WatermarkPayload":
        if len(self.bits) < 1:
            raise ConfigurationError("payload needs at least one bit")
        if any(b not in (0, 1) for b in self.bits):
            raise ConfigurationError("payload bits must be 0 or 1")
        if self.replication < 1:
            raise ConfigurationError(f"replication must be >= 1, got {self.replication}")
        if len(self.bits) * self.replication > latent_elements:
            raise CapacityError(
                f"payload needs {len(self.bits) * self.replication} positions "
                f"but the latent has only {latent_elements}"
            )
        return self

    @classmethod
    def random(cls, seed: int, k: int = DEFAULT_BITS, replication: int = DEFAULT_REPLICATION) -> "WatermarkPayload":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
        bits = tuple(int(b) for b in rng.integers(0, 2, size=k))
        return cls(bits=bits, replication=replication, seed=seed)


def _positions(seed: int, latent_elements: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence((seed, 5))).permutation(latent_elements)


def embed(
    payload: WatermarkPayload,
    latent_shape: tuple[int, int, int] = (4, 8, 8),
    magnitude_seed: int | None = None,
) -> np.ndarray:
    """Payload -> one latent carrier of `latent_shape`.

    ``magnitude_seed`` varies the half-normal magnitudes between carriers of
    the same payload; it defaults to the payload seed, so embedding is
    deterministic unless the caller asks otherwise.
    """
    n_elem = int(np.prod(latent_shape))
    payload.validate(n_elem)
    k, r = len(payload.bits), payload.replication
    mag_seed = payload.seed if magnitude_seed is None else magnitude_seed
    rng = np.random.default_rng(np.random.SeedSequence((payload.seed, mag_seed, 7)))
    flat = np.abs(rng.standard_normal(n_elem))
    signs = np.where(rng.random(n_elem) < 0.5, -1.0, 1.0)  # uncontrolled positions stay N(0,1)
    perm = _positions(payload.seed, n_elem)
    for b, bit in enumerate(payload.bits):
        signs[perm[b * r : (b + 1) * r]] = 1.0 if bit else -1.0
    return (flat * signs).reshape(latent_shape).astype(np.float32)


def extract_from_latent(latent: np.ndarray, seed: int, k: int, r: int) -> np.ndarray:
    """Majority vote over the signs at each bit's positions; ties break on the
    summed value at those positions."""
    z = np.asarray(latent, dtype=np.float64).reshape(-1)
    if k * r > z.size:
        raise CapacityError(f"cannot extract {k}x{r} positions from a latent of {z.size} elements")
    perm = _positions(seed, z.size)
    bits = np.zeros(k, dtype=np.uint8)
    for b in range(k):
        vals = z[perm[b * r : (b + 1) * r]]
        pos = int(np.count_nonzero(vals > 0))
        if pos * 2 > r:
            bits[b] = 1
        elif pos * 2 < r:
            bits[b] = 0
        else:
            bits[b] = 1 if vals.sum() > 0 else 0
    return bits


def extract(
    image: np.ndarray,
    encoder: Callable[[np.ndarray], np.ndarray],
    seed: int,
    k: int = DEFAULT_BITS,
    r: int = DEFAULT_REPLICATION,
) -> np.ndarray:
    """Re-encode `image` (HWC) with the reference encoder and decode the bits."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise ConfigurationError(f"extract expects a single HWC image, got shape {img.shape}")
    latent = encoder(img[None])[0]
    return extract_from_latent(latent, seed, k, r)


@dataclass
class RobustnessTable:
    """Bit accuracy per attack for one decode path; 'none' is the clean column."""

    path: str
    accuracies: dict[str, float]

    def to_row(self, columns: Sequence[str]) -> list:
        return [self.path] + [round(self.accuracies[c], 6) for c in columns]


def robustness_eval(
    payloads: Sequence[WatermarkPayload],
    decode_path: Callable[[np.ndarray], np.ndarray],
    encoder: Callable[[np.ndarray], np.ndarray],
    attack_suite: Sequence,
    path_name: str = "path",
    latent_shape: tuple[int, int, int] = (4, 8, 8),
) -> RobustnessTable:
    """Accuracy of payload recovery through decode -> attack -> re-encode.

    ``decode_path`` maps a latent batch to an image batch; each attack in the
    suite is applied per image.  The 'none' column is always included.
    """
    from .attacks import apply_attack  # local import to avoid a module cycle

    if len(payloads) == 0:
        raise ConfigurationError("robustness_eval needs at least one payload")
    latents = np.stack([embed(p, latent_shape) for p in payloads])
    images = decode_path(latents)
    names = ["none"] + [spec.kind for spec in attack_suite]
    if len(set(names)) != len(names):
        raise ConfigurationError("attack suite has duplicate kinds; use one spec per kind")
    accs: dict[str, float] = {}
    for name, spec in zip(names, [None] + list(attack_suite)):
        total = 0.0
        for img, payload in zip(images, payloads):
            attacked = img if spec is None else apply_attack(img, spec)
            got = extract(attacked, encoder, payload.seed, len(payload.bits), payload.replication)
            total += bit_accuracy(np.array(payload.bits), got)
        accs[name] = total / len(payloads)
    return RobustnessTable(path=path_name, accuracies=accs)
