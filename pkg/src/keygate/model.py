"""Reference autoencoder and the key-gated decoder built on top of it.

The reference maps 3x32x32 images to a 4x8x8 latent and back.  The gated
variant shares the frozen reference weights and adds three kinds of layers:

* ``m`` extra mid blocks, structurally identical to the two originals,
  placed before and after them;
* ``n`` extra up/down pairs spread round-robin over the three decoder
  stages (two resolution-doubling stages and one refinement stage);
* key-conditioned fuser layers at configured positions.

All additions initialize to exact identities, so an untrained gated decoder
reproduces the reference bit for bit.  Quality then concentrates into the
additions during fine-tuning, which is what makes removing them costly.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, TrainingError
from .keys import MAX_STRUCTURE, RemovalHypothesis, UP_STAGES, FuserKey
from .nn import Conv2d, FuserLayer, MidBlock, Module, ModuleList, RefineStage, UpDownPair, UpStage
from .tensor import Tensor

FUSER_POSITIONS = ("input", "post_mid", "pre_output")


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    in_channels: int = 3
    latent_channels: int = 4
    enc_widths: tuple[int, int, int] = (24, 24, 32)
    dec_widths: tuple[int, int, int] = (32, 24, 16)

    def validate(self) -> "ArchConfig":
        if self.image_size % 4 != 0 or self.image_size < 8:
            raise ConfigurationError(f"image_size must be a multiple of 4 and >= 8, got {self.image_size}")
        if self.latent_channels < 1:
            raise ConfigurationError(f"latent_channels must be >= 1, got {self.latent_channels}")
        return self

    @property
    def latent_hw(self) -> int:
        return self.image_size // 4

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_hw, self.latent_hw)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "latent_channels": self.latent_channels,
            "enc_widths": list(self.enc_widths),
            "dec_widths": list(self.dec_widths),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        return cls(
            image_size=int(data["image_size"]),
            in_channels=int(data["in_channels"]),
            latent_channels=int(data["latent_channels"]),
            enc_widths=tuple(int(w) for w in data["enc_widths"]),
            dec_widths=tuple(int(w) for w in data["dec_widths"]),
        ).validate()


@dataclass(frozen=True)
class StructureConfig:
    """How much structure the gated decoder adds: m mid blocks, n up/down pairs."""

    m: int = 0
    n: int = 0
    fuser_positions: tuple[str, ...] = ("input", "pre_output")
    label: str | None = None

    def validate(self) -> "StructureConfig":
        if self.m < 0 or self.n < 0:
            raise ConfigurationError(f"added-layer counts must be >= 0, got m={self.m}, n={self.n}")
        if self.m > MAX_STRUCTURE or self.n > MAX_STRUCTURE:
            raise ConfigurationError(f"m and n are capped at {MAX_STRUCTURE}, got m={self.m}, n={self.n}")
        seen = set()
        for pos in self.fuser_positions:
            if pos not in FUSER_POSITIONS:
                raise ConfigurationError(f"unknown fuser position {pos!r}; valid: {FUSER_POSITIONS}")
            if pos in seen:
                raise ConfigurationError(f"duplicate fuser position {pos!r}")
            seen.add(pos)
        return self

    @classmethod
    def from_label(cls, label: str, fuser_positions: tuple[str, ...] = ("input", "pre_output")) -> "StructureConfig":
        """Parse a "M-U" size label: M total mid blocks, U total up-chain layers.

        The reference owns 2 mid blocks and 1 resolution-doubling layer per
        its minimal chain, so "8-6" means m=6 added mids and n=5 added pairs.
        """
        parts = label.strip().split("-")
        if len(parts) != 2:
            raise ConfigurationError(f"structure label must look like 'M-U', got {label!r}")
        try:
            total_mid, total_up = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ConfigurationError(f"structure label must be numeric, got {label!r}") from exc
        if total_mid < 2 or total_up < 1:
            raise ConfigurationError(f"label {label!r} implies negative added counts (needs M >= 2, U >= 1)")
        return cls(m=total_mid - 2, n=total_up - 1, fuser_positions=fuser_positions, label=label).validate()

    def structure_label(self) -> str:
        return self.label if self.label is not None else f"{self.m + 2}-{self.n + 1}"

    def to_metadata(self) -> dict:
        return {"m": self.m, "n": self.n, "fuser_positions": list(self.fuser_positions), "label": self.label}

    @classmethod
    def from_metadata(cls, meta: dict) -> "StructureConfig":
        return cls(
            m=int(meta["m"]),
            n=int(meta["n"]),
            fuser_positions=tuple(meta["fuser_positions"]),
            label=meta.get("label"),
        ).validate()


# ------------------------------------------------------------------ networks
class Encoder(Module):
    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        super().__init__()
        w0, w1, w2 = arch.enc_widths
        self.conv1 = Conv2d(arch.in_channels, w0, rng=rng)
        self.conv2 = Conv2d(w0, w1, stride=2, rng=rng)
        self.conv3 = Conv2d(w1, w2, stride=2, rng=rng)
        self.conv_latent = Conv2d(w2, arch.latent_channels, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.silu(self.conv1(x))
        h = T.silu(self.conv2(h))
        h = T.silu(self.conv3(h))
        return self.conv_latent(h)


class ReferenceDecoder(Module):
    """Latent -> image: conv in, two mid blocks, two up stages, one refine stage."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        super().__init__()
        d0, d1, d2 = arch.dec_widths
        self.conv_in = Conv2d(arch.latent_channels, d0, rng=rng)
        self.mids = ModuleList([MidBlock(d0, rng), MidBlock(d0, rng)])
        self.stages = ModuleList([UpStage(d0, d1, rng), UpStage(d1, d2, rng), RefineStage(d2, rng)])
        self.conv_out = Conv2d(d2, arch.in_channels, rng=rng)

    def __call__(self, z: Tensor) -> Tensor:
        h = T.silu(self.conv_in(z))
        for mid in self.mids:
            h = mid(h)
        for stage in self.stages:
            h = stage(h)
        return T.sigmoid(self.conv_out(h))


def _images_to_nchw(images: np.ndarray, arch: ArchConfig) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    expected = (arch.image_size, arch.image_size, arch.in_channels)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ConfigurationError(f"expected image batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def _nchw_to_images(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))


def check_latents(latents: np.ndarray, arch: ArchConfig) -> np.ndarray:
    arr = np.asarray(latents, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1:] != arch.latent_shape:
        raise ConfigurationError(f"expected latent batch of shape (N,) + {arch.latent_shape}, got {arr.shape}")
    return arr


def _batched(fn: Callable[[np.ndarray], np.ndarray], arr: np.ndarray, batch_size: int) -> np.ndarray:
    if len(arr) == 0:
        raise ConfigurationError("empty batch")
    parts = [fn(arr[i : i + batch_size]) for i in range(0, len(arr), batch_size)]
    return np.concatenate(parts, axis=0)


class ReferenceAutoencoder(Module):
    def __init__(self, arch: ArchConfig, rng: np.random.Generator, seed: int | None = None):
        super().__init__()
        self.arch = arch.validate()
        self.build_seed = seed
        self.encoder = Encoder(arch, rng)
        self.decoder = ReferenceDecoder(arch, rng)

    def encode_np(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        x = _images_to_nchw(images, self.arch)
        return _batched(lambda b: self.encoder(Tensor(b)).data, x, batch_size)

    def decode_np(self, latents: np.ndarray, batch_size: int = 64) -> np.ndarray:
        z = check_latents(latents, self.arch)
        return _batched(lambda b: _nchw_to_images(self.decoder(Tensor(b)).data), z, batch_size)

    def reconstruct_np(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return self.decode_np(self.encode_np(images, batch_size), batch_size)

    def arch_dict(self) -> dict:
        return self.arch.to_dict()


def build_reference(seed: int = 0, arch: ArchConfig | None = None) -> ReferenceAutoencoder:
    arch = (arch or ArchConfig()).validate()
    rng = np.random.default_rng(seed)
    model = ReferenceAutoencoder(arch, rng, seed=seed)
    model.assign_names()
    return model


# ----------------------------------------------------------- gated decoder
@dataclass
class DecodeResult:
    """Decoded images plus how the decode ran.

    ``authorized`` is True only when a key was supplied, the fusers ran, and
    the key matched the registered fingerprint.  ``condition`` records the
    input mode: "keyed", "no_fuser", or "removal".
    """

    images: np.ndarray
    authorized: bool
    condition: str


@dataclass(frozen=True)
class _Plan:
    mid_entries: tuple[int, ...]
    stage_entries: tuple[tuple[int, ...], ...]  # per stage, candidate indices to run in order


class GatedDecoder(Module):
    """The reference decoder augmented with keyed fusers and identity-initialized
    structure.  Reference parameters stay frozen; only additions train."""

    def __init__(self, reference: ReferenceAutoencoder, config: StructureConfig, rng: np.random.Generator, seed: int | None = None):
        super().__init__()
        if not all(p.frozen for p in reference.parameters()):
            raise TrainingError("reference must be frozen before building a gated decoder")
        self.config = config.validate()
        self.arch = reference.arch
        self.build_seed = seed
        self.key_fingerprint: dict | None = None
        self.reference = reference

        d0 = self.arch.dec_widths[0]
        d2 = self.arch.dec_widths[2]
        self.added_mids = ModuleList([MidBlock(d0, rng, zero_residual=True) for _ in range(config.m)])
        # Interleave added mids around the originals: even insertions in front,
        # odd ones behind, so both flanks are populated.
        before: list[int] = []
        after: list[int] = []
        for k in range(config.m):
            (before if k % 2 == 0 else after).append(k)
        # Chain entries: >= 0 indexes added_mids, -1 and -2 are originals 0 and 1.
        self._mid_chain: tuple[int, ...] = tuple(before) + (-1, -2) + tuple(after)

        stage_widths = (d0, self.arch.dec_widths[1], d2)
        pairs_per_stage: list[list[UpDownPair]] = [[], [], []]
        for j in range(config.n):
            s = j % UP_STAGES
            # The pair runs after the stage's own op, so it sees the stage's
            # output width.
            out_width = stage_widths[s + 1] if s + 1 < len(stage_widths) else d2
            pairs_per_stage[s].append(UpDownPair(out_width))
        self.pairs = ModuleList([ModuleList(group) for group in pairs_per_stage])

        fuser_widths = {"input": d0, "post_mid": d0, "pre_output": d2}
        self._fusers: dict[str, FuserLayer] = {}
        for pos in config.fuser_positions:
            fuser = FuserLayer(fuser_widths[pos], rng)
            setattr(self, f"fuser_{pos}", fuser)
            self._fusers[pos] = fuser

    # -------------------------------------------------------------- key admin
    def register_key(self, key: FuserKey, salt_seed: int = 0) -> None:
        salt = np.random.default_rng(salt_seed).bytes(16)
        self.key_fingerprint = {"salt": salt.hex(), "digest": key.fingerprint(salt)}

    def verify_key(self, key: FuserKey) -> bool:
        if self.key_fingerprint is None:
            return False
        salt = bytes.fromhex(self.key_fingerprint["salt"])
        return key.fingerprint(salt) == self.key_fingerprint["digest"]

    # ----------------------------------------------------------- structure
    def added_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("reference.")]

    def reference_parameters(self):
        return [p for name, p in self.named_parameters() if name.startswith("reference.")]

    def mid_chain_blocks(self) -> list[tuple[str, MidBlock]]:
        out = []
        for entry in self._mid_chain:
            if entry < 0:
                out.append(("orig", self.reference.decoder.mids[-entry - 1]))
            else:
                out.append(("added", self.added_mids[entry]))
        return out

    def stage_candidates(self, stage: int) -> list[tuple[str, Module]]:
        """Candidate layers at one stage: the original first, then added pairs."""
        cands: list[tuple[str, Module]] = [("orig", self.reference.decoder.stages[stage])]
        for pair in self.pairs[stage]:
            cands.append(("pair", pair))
        return cands

    def resolve_hypothesis(self, removal: RemovalHypothesis | None) -> _Plan:
        """Map an abstract removal hypothesis onto this decoder's layout.

        A hypothesis is invalid (configuration error) when it names a
        candidate a stage does not have, or keeps a net-1x pair in place of a
        resolution-doubling original; both are statically visible to an
        attacker, so no trial decode is spent on them.
        """
        full_stages = tuple(tuple(range(1 + len(self.pairs[s]))) for s in range(UP_STAGES))
        if removal is None:
            return _Plan(mid_entries=tuple(range(len(self._mid_chain))), stage_entries=full_stages)
        if removal.kind == "mid":
            a, b = removal.mid_survivors
            if b >= len(self._mid_chain):
                raise ConfigurationError(
                    f"hypothesis keeps mid block {b} but the chain has {len(self._mid_chain)} blocks"
                )
            return _Plan(mid_entries=(a, b), stage_entries=full_stages)
        chosen = []
        for s, v in enumerate(removal.up_survivors):
            cands = self.stage_candidates(s)
            if v >= len(cands):
                raise ConfigurationError(
                    f"hypothesis names candidate {v} at stage {s}, which has only {len(cands)} candidates"
                )
            kind, layer = cands[v]
            if layer.scale != cands[0][1].scale:
                raise ConfigurationError(
                    f"hypothesis keeps a net-1x layer as the stage-{s} original, which would change the output resolution"
                )
            chosen.append((v,))
        return _Plan(mid_entries=tuple(range(len(self._mid_chain))), stage_entries=tuple(chosen))

    # -------------------------------------------------------------- forward
    def forward_tensor(
        self,
        z: Tensor,
        key_vec: Tensor | None,
        use_fusers: bool = True,
        plan: _Plan | None = None,
    ) -> Tensor:
        if plan is None:
            plan = self.resolve_hypothesis(None)
        fusers_on = use_fusers and key_vec is not None
        dec = self.reference.decoder
        chain = self.mid_chain_blocks()

        h = T.silu(dec.conv_in(z))
        if fusers_on and "input" in self._fusers:
            h = self._fusers["input"](h, key_vec)
        for idx in plan.mid_entries:
            h = chain[idx][1](h)
        if fusers_on and "post_mid" in self._fusers:
            h = self._fusers["post_mid"](h, key_vec)
        for s in range(UP_STAGES):
            cands = self.stage_candidates(s)
            for v in plan.stage_entries[s]:
                h = cands[v][1](h)
        if fusers_on and "pre_output" in self._fusers:
            h = self._fusers["pre_output"](h, key_vec)
        return T.sigmoid(dec.conv_out(h))

    def decode_np(
        self,
        latents: np.ndarray,
        key: FuserKey | None = None,
        use_fusers: bool = True,
        removal: RemovalHypothesis | None = None,
        batch_size: int = 64,
    ) -> DecodeResult:
        z = check_latents(latents, self.arch)
        plan = self.resolve_hypothesis(removal)
        key_vec = Tensor(key.to_bipolar().reshape(1, -1)) if key is not None else None
        fusers_on = use_fusers and key_vec is not None

        def run(batch: np.ndarray) -> np.ndarray:
            return _nchw_to_images(self.forward_tensor(Tensor(batch), key_vec, use_fusers=fusers_on, plan=plan).data)

        images = _batched(run, z, batch_size)
        if removal is not None:
            condition = "removal"
        elif not fusers_on:
            condition = "no_fuser"
        else:
            condition = "keyed"
        authorized = fusers_on and removal is None and key is not None and self.verify_key(key)
        return DecodeResult(images=images, authorized=authorized, condition=condition)


def decode(model, latents: np.ndarray, key: FuserKey | None = None, **kwargs) -> DecodeResult:
    """Uniform decode entry point for reference and gated models."""
    if isinstance(model, GatedDecoder):
        return model.decode_np(latents, key=key, **kwargs)
    if isinstance(model, ReferenceAutoencoder):
        if key is not None:
            raise ConfigurationError("the reference decoder takes no key")
        return DecodeResult(images=model.decode_np(latents, **kwargs), authorized=False, condition="reference")
    raise ConfigurationError(f"cannot decode with object of type {type(model).__name__}")


def build_gated(reference: ReferenceAutoencoder, config: StructureConfig, seed: int = 0) -> GatedDecoder:
    rng = np.random.default_rng(seed)
    model = GatedDecoder(reference, config.validate(), rng, seed=seed)
    model.assign_names()
    return model
