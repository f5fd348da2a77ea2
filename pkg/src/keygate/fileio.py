"""On-disk formats: tensor checkpoints, PPM images, and run configuration.

The checkpoint format is a flat binary container: a magic line, a version,
then one record per tensor (name, dims, dtype, frozen flag, raw
little-endian payload), then a trailing UTF-8 JSON metadata blob.  The
format never stores a key, only its salted fingerprint.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FileFormatError
from .imageops import check_image, dequantize_u8, quantize_u8

CHECKPOINT_MAGIC = b"PCDF1\n"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


@dataclass
class TensorRecord:
    name: str
    array: np.ndarray
    frozen: bool


@dataclass
class Checkpoint:
    """All tensors of a model plus JSON-serializable metadata."""

    tensors: list[TensorRecord]
    metadata: dict

    def tensor_map(self) -> dict[str, TensorRecord]:
        return {rec.name: rec for rec in self.tensors}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for rec in ckpt.tensors:
        arr = np.ascontiguousarray(rec.array)
        if arr.dtype not in _DTYPE_TAGS:
            raise FileFormatError(f"tensor {rec.name!r} has unsupported dtype {arr.dtype}")
        name = rec.name.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        buf.write(struct.pack("<B", 1 if rec.frozen else 0))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    buf.write(json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = io.BytesIO(raw)

    def take(n: int, what: str) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise FileFormatError(f"truncated checkpoint while reading {what}")
        return chunk

    magic = take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FileFormatError(f"bad checkpoint magic: expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(
            f"unsupported checkpoint version: expected {CHECKPOINT_VERSION}, found {version}"
        )
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: list[TensorRecord] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims")) if rank else ()
        (tag,) = struct.unpack("<B", take(1, "dtype tag"))
        if tag not in _TAG_DTYPES:
            raise FileFormatError(f"unknown dtype tag {tag} for tensor {name!r}")
        (frozen,) = struct.unpack("<B", take(1, "frozen flag"))
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
        tensors.append(TensorRecord(name, arr, bool(frozen)))
    tail = view.read()
    try:
        metadata = json.loads(tail.decode("utf-8")) if tail else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"corrupt checkpoint metadata: {exc}") from None
    return Checkpoint(tensors, metadata)


# ----------------------------------------------------------------- PPM images
def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write an HWC float image in [0,1] as binary PPM (P6, maxval 255)."""
    arr = check_image(image)
    if arr.shape[2] != 3:
        raise FileFormatError(f"P6 images need 3 channels, got {arr.shape[2]}")
    h, w = arr.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantize_u8(arr).tobytes())


def load_image(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        found = raw[:2].decode("ascii", errors="replace")
        raise FileFormatError(f"not a binary RGB PPM: expected magic 'P6', found {found!r}")
    pos = 2
    values: list[int] = []
    while len(values) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise FileFormatError(f"malformed PPM header token {token!r}")
        values.append(int(token))
    pos += 1
    w, h, maxval = values
    if maxval != 255:
        raise FileFormatError(f"unsupported PPM maxval {maxval}; expected 255")
    expected = w * h * 3
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise FileFormatError(f"truncated PPM payload: expected {expected} bytes, found {len(payload)}")
    return dequantize_u8(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3))


# ----------------------------------------------------------------- run config
@dataclass
class RunConfig:
    """Flat key=value run configuration. Every field has a default.

    One file drives the whole pipeline; subcommands read the subset they
    need.  Unknown keys are a hard error so typos cannot silently fall
    back to defaults.
    """

    dataset_count: int = 500
    dataset_seed: int = 0
    image_size: int = 32
    train_fraction: float = 0.9

    structure_m: int = 2
    structure_n: int = 1
    fuser_positions: str = "input,pre_output"

    ref_steps: int = 800
    ref_batch_size: int = 16
    ref_learning_rate: float = 1e-3
    ref_cycle_weight: float = 0.05
    ref_moment_weight: float = 0.02

    gate_steps: int = 800
    gate_batch_size: int = 8
    gate_learning_rate: float = 2e-4
    gate_lambda_mae: float = 1.0
    gate_lambda_perceptual: float = 1.0
    gate_lambda_repulsion: float = 0.1
    gate_margin_wrong: float = 0.05
    gate_band_wrong: float = 0.08
    gate_margin_absent: float = 0.12
    gate_gaussian_fraction: float = 0.5

    watermark_bits: int = 32
    watermark_replication: int = 8
    watermark_seed: int = 0

    attack_seed: int = 0
    eval_latents: int = 100
    seed: int = 0
    out_dir: str = "runs/out"

    def validate(self) -> "RunConfig":
        if self.dataset_count < 1:
            raise ConfigurationError(f"dataset_count must be >= 1, got {self.dataset_count}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        for name in ("ref_steps", "gate_steps", "ref_batch_size", "gate_batch_size", "eval_latents"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        return self

    def fuser_position_tuple(self) -> tuple[str, ...]:
        return tuple(p.strip() for p in self.fuser_positions.split(",") if p.strip())

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def parse_run_config(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' comments and blank lines are ignored."""
    spec = {f.name: f.type for f in fields(RunConfig)}
    cfg = RunConfig()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value', got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in spec:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        current = getattr(cfg, key)
        try:
            if isinstance(current, bool):
                parsed: object = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                parsed = int(value)
            elif isinstance(current, float):
                parsed = float(value)
            else:
                parsed = value
        except ValueError:
            raise ConfigurationError(f"config line {lineno}: bad value {value!r} for {key!r}") from None
        setattr(cfg, key, parsed)
    return cfg.validate()


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    return parse_run_config(p.read_text(encoding="utf-8"))


# ----------------------------------------------------- model <-> checkpoint
def _records_from_module(module) -> list[TensorRecord]:
    return [
        TensorRecord(name, param.tensor.data.copy(), param.frozen)
        for name, param in module.named_parameters()
    ]


def checkpoint_from_reference(model, metadata: dict | None = None) -> Checkpoint:
    meta = {"model_kind": "reference", "arch": model.arch_dict()}
    meta.update(metadata or {})
    return Checkpoint(_records_from_module(model), meta)


def checkpoint_from_gated(model, metadata: dict | None = None) -> Checkpoint:
    meta = {
        "model_kind": "gated",
        "arch": model.reference.arch_dict(),
        "structure": model.config.to_metadata(),
        "key_fingerprint": model.key_fingerprint,
    }
    meta.update(metadata or {})
    return Checkpoint(_records_from_module(model), meta)


def _load_params(module, ckpt: Checkpoint, *, expect_prefix: str = "") -> None:
    table = ckpt.tensor_map()
    for name, param in module.named_parameters():
        key = expect_prefix + name
        if key not in table:
            raise FileFormatError(f"checkpoint is missing tensor {key!r}")
        rec = table[key]
        if rec.array.shape != param.tensor.data.shape:
            raise FileFormatError(
                f"tensor {key!r} shape mismatch: checkpoint {rec.array.shape}, model {param.tensor.data.shape}"
            )
        param.data = rec.array.astype(param.tensor.data.dtype)
        param.frozen = rec.frozen


def reference_from_checkpoint(ckpt: Checkpoint):
    from .model import ArchConfig, build_reference

    if ckpt.metadata.get("model_kind") != "reference":
        raise FileFormatError(f"expected a reference checkpoint, found {ckpt.metadata.get('model_kind')!r}")
    arch = ArchConfig.from_dict(ckpt.metadata["arch"])
    model = build_reference(seed=0, arch=arch)
    _load_params(model, ckpt)
    return model


def gated_from_checkpoint(ckpt: Checkpoint, reference=None):
    from .model import ArchConfig, StructureConfig, build_gated, build_reference

    if ckpt.metadata.get("model_kind") != "gated":
        raise FileFormatError(f"expected a gated checkpoint, found {ckpt.metadata.get('model_kind')!r}")
    if reference is None:
        arch = ArchConfig.from_dict(ckpt.metadata["arch"])
        reference = build_reference(seed=0, arch=arch)
        table = ckpt.tensor_map()
        for name, param in reference.named_parameters():
            key = "reference." + name
            if key not in table:
                raise FileFormatError(f"checkpoint is missing tensor {key!r}")
            param.data = table[key].array.astype(param.tensor.data.dtype)
        reference.freeze_()
    config = StructureConfig.from_metadata(ckpt.metadata["structure"])
    model = build_gated(reference, config, seed=0)
    _load_params(model, ckpt)
    fp = ckpt.metadata.get("key_fingerprint")
    if fp:
        model.key_fingerprint = dict(fp)
    return model
