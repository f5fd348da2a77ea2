"""Key material and the removal-hypothesis space an attacker must search.

A decoder built with ``m`` added mid blocks and ``n`` added up/down pairs
presents ``m + 2`` structurally identical mid blocks and ``n + 1`` candidate
layers per upsampling stage.  An attacker who wants the reference decoder
back must guess which blocks are original, giving

    C(m + 2, 2) + (n + 1)^3

hypotheses: the mid guesses keep the up chain intact and each up guess keeps
every mid block, so the two sub-spaces are disjoint.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, KeyFormatError, ResourceLimitError

KEY_BITS = 128
MAX_STRUCTURE = 20  # hard bound on m and n for exhaustive enumeration
UP_STAGES = 3


class FuserKey:
    """A 128-bit fuser credential.

    Canonical text form is 32 lowercase hex characters.  Bit 0 is the most
    significant bit of the first hex digit, so ``"8" + "0" * 31`` sets only
    bit 0.
    """

    __slots__ = ("_raw",)

    def __init__(self, bits):
        arr = np.asarray(bits)
        if arr.shape != (KEY_BITS,):
            raise KeyFormatError(f"key must have exactly {KEY_BITS} bits, got {arr.size}")
        if not np.all((arr == 0) | (arr == 1)):
            raise KeyFormatError("key bits must be 0 or 1")
        self._raw = np.packbits(arr.astype(np.uint8)).tobytes()

    # ------------------------------------------------------------- constructors
    @classmethod
    def from_hex(cls, text: str) -> "FuserKey":
        if not isinstance(text, str):
            raise KeyFormatError(f"key text must be a string, got {type(text).__name__}")
        s = text.strip().lower()
        if len(s) != KEY_BITS // 4:
            raise KeyFormatError(f"key text must be {KEY_BITS // 4} hex characters, got {len(s)}")
        try:
            raw = bytes.fromhex(s)
        except ValueError as exc:
            raise KeyFormatError(f"key text is not valid hex: {text!r}") from exc
        return cls(np.unpackbits(np.frombuffer(raw, dtype=np.uint8)))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FuserKey":
        if len(raw) != KEY_BITS // 8:
            raise KeyFormatError(f"key must be {KEY_BITS // 8} bytes, got {len(raw)}")
        return cls(np.unpackbits(np.frombuffer(raw, dtype=np.uint8)))

    # ----------------------------------------------------------------- views
    @property
    def bits(self) -> np.ndarray:
        return np.unpackbits(np.frombuffer(self._raw, dtype=np.uint8))

    @property
    def raw(self) -> bytes:
        return self._raw

    def to_hex(self) -> str:
        return self._raw.hex()

    def to_bipolar(self) -> np.ndarray:
        """Bits mapped to {-1, +1} float32 (bit 1 -> +1), shape (128,)."""
        return (self.bits.astype(np.float32) * 2.0 - 1.0)

    def hamming(self, other: "FuserKey") -> int:
        return int(np.count_nonzero(self.bits != other.bits))

    def fingerprint(self, salt: bytes) -> str:
        """Salted SHA-256; lets a checkpoint verify a key without storing it."""
        return hashlib.sha256(salt + self._raw).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, FuserKey) and self._raw == other._raw

    def __hash__(self) -> int:
        return hash(self._raw)

    def __repr__(self) -> str:
        return f"FuserKey({self.to_hex()})"


def generate_key(seed: int | None = None) -> FuserKey:
    if seed is None:
        rng = np.random.default_rng()
    else:
        rng = np.random.default_rng(seed)
    return FuserKey.from_bytes(rng.bytes(KEY_BITS // 8))


def parse_key(text: str) -> FuserKey:
    return FuserKey.from_hex(text)


def sample_wrong_key(rng: np.random.Generator, correct: FuserKey) -> FuserKey:
    """A uniformly random key that is guaranteed to differ from `correct`."""
    while True:
        candidate = FuserKey.from_bytes(rng.bytes(KEY_BITS // 8))
        if candidate != correct:
            return candidate


# --------------------------------------------------------------- hypotheses
@dataclass(frozen=True)
class RemovalHypothesis:
    """One attacker guess at the original structure.

    ``kind == "mid"``: `mid_survivors` names the two mid blocks kept as the
    supposed originals; the entire up chain is left alone.
    ``kind == "up"``: `up_survivors` names, per upsampling stage, which of the
    stage's ``n + 1`` candidate layers is kept; all mid blocks are left alone.
    """

    kind: str
    mid_survivors: tuple[int, int] | None = None
    up_survivors: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind == "mid":
            if self.mid_survivors is None or self.up_survivors is not None:
                raise ConfigurationError("mid hypothesis must set mid_survivors only")
            a, b = self.mid_survivors
            if not 0 <= a < b:
                raise ConfigurationError(f"mid survivors must be an ordered pair, got {self.mid_survivors}")
        elif self.kind == "up":
            if self.up_survivors is None or self.mid_survivors is not None:
                raise ConfigurationError("up hypothesis must set up_survivors only")
            if len(self.up_survivors) != UP_STAGES or any(s < 0 for s in self.up_survivors):
                raise ConfigurationError(f"up survivors must be {UP_STAGES} non-negative indices, got {self.up_survivors}")
        else:
            raise ConfigurationError(f"hypothesis kind must be 'mid' or 'up', got {self.kind!r}")

    def label(self) -> str:
        if self.kind == "mid":
            return f"mid{self.mid_survivors[0]}-{self.mid_survivors[1]}"
        return "up" + "".join(str(s) for s in self.up_survivors)

    def removes_anything(self, m: int, n: int) -> bool:
        """False only for the guess that keeps the whole decoder (n = 0, all-original)."""
        if self.kind == "mid":
            return m > 0 or self.mid_survivors != (0, 1)
        return n > 0 or self.up_survivors != (0, 0, 0)


def _check_structure_counts(m: int, n: int) -> None:
    if m < 0 or n < 0:
        raise ConfigurationError(f"added-layer counts must be >= 0, got m={m}, n={n}")


def combination_count(m: int, n: int) -> int:
    """Size of the removal-hypothesis space for m added mids, n added pairs."""
    _check_structure_counts(m, n)
    return math.comb(m + 2, 2) + (n + 1) ** 3


def enumerate_removals(m: int, n: int) -> list[RemovalHypothesis]:
    """Every hypothesis, mid guesses first, in deterministic lexicographic order."""
    _check_structure_counts(m, n)
    if m > MAX_STRUCTURE or n > MAX_STRUCTURE:
        raise ResourceLimitError(f"refusing to enumerate beyond m,n <= {MAX_STRUCTURE}: got m={m}, n={n}")
    out: list[RemovalHypothesis] = []
    total_mids = m + 2
    for a in range(total_mids):
        for b in range(a + 1, total_mids):
            out.append(RemovalHypothesis(kind="mid", mid_survivors=(a, b)))
    per_stage = n + 1
    for a in range(per_stage):
        for b in range(per_stage):
            for c in range(per_stage):
                out.append(RemovalHypothesis(kind="up", up_survivors=(a, b, c)))
    return out


# --------------------------------------------------------------- crack time
@dataclass(frozen=True)
class CrackEstimate:
    m: int
    n: int
    combinations: int
    t_test_s: float
    t_crack_s: float

    def to_json_dict(self) -> dict:
        t = self.t_crack_s
        return {
            "m": self.m,
            "n": self.n,
            "combinations": self.combinations,
            "t_test_s": self.t_test_s,
            "t_crack_s": int(t) if float(t).is_integer() else t,
        }


def crack_time(m: int, n: int, t_test_s: float) -> CrackEstimate:
    """Expected exhaustive-search cost: per-hypothesis test time x space size."""
    if t_test_s <= 0:
        raise ConfigurationError(f"t_test_s must be > 0, got {t_test_s}")
    count = combination_count(m, n)
    return CrackEstimate(m=m, n=n, combinations=count, t_test_s=float(t_test_s), t_crack_s=float(t_test_s) * count)
