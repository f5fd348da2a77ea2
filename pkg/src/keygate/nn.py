"""Parameter containers and the conv/linear building blocks.

Modules register parameters and submodules automatically on attribute
assignment, so ``named_parameters`` can walk the tree and produce stable
dotted names for checkpointing.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


class Parameter:
    """A trainable (or frozen) array with an identity that survives saving.

    Freezing flips ``requires_grad`` off, so no graph is recorded through the
    value and the optimizer refuses to touch it.
    """

    __slots__ = ("tensor", "name", "_frozen")

    def __init__(self, data: np.ndarray, frozen: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.tensor = Tensor(arr, requires_grad=not frozen)
        self.name = name
        self._frozen = bool(frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.tensor.requires_grad = not self._frozen

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=self.tensor.data.dtype)
        if arr.shape != self.tensor.data.shape:
            raise ConfigurationError(
                f"parameter {self.name or '<unnamed>'}: cannot load shape {arr.shape} into {self.tensor.data.shape}"
            )
        self.tensor.data = arr

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        state = "frozen" if self._frozen else "trainable"
        return f"Parameter({self.name or '<unnamed>'}, shape={self.tensor.data.shape}, {state})"


class Module:
    """Base class with automatic parameter/submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_mods", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._mods[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield prefix + key, p
        for key, m in self._mods.items():
            yield from m.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def freeze_(self) -> "Module":
        for p in self.parameters():
            p.frozen = True
        return self

    def assign_names(self, prefix: str = "") -> "Module":
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, mods: Iterable[Module] = ()):
        super().__init__()
        self._items: list[Module] = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module) -> None:
        setattr(self, str(len(self._items)), mod)
        self._items.append(mod)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, idx: int) -> Module:
        return self._items[idx]


# ------------------------------------------------------------- initializers
def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def _delta_kernel(channels: int, ksize: int) -> np.ndarray:
    """OIHW kernel that copies each channel through unchanged."""
    w = np.zeros((channels, channels, ksize, ksize), dtype=np.float32)
    c = ksize // 2
    for i in range(channels):
        w[i, i, c, c] = 1.0
    return w


# -------------------------------------------------------------------- layers
class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        ksize: int = 3,
        stride: int = 1,
        padding: int = 1,
        rng: np.random.Generator | None = None,
        init: str = "he",
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ksize = ksize
        self.stride = stride
        self.padding = padding
        if init == "he":
            if rng is None:
                raise ConfigurationError("he init requires an rng")
            w = he_normal(rng, (out_channels, in_channels, ksize, ksize), in_channels * ksize * ksize)
        elif init == "zero":
            w = np.zeros((out_channels, in_channels, ksize, ksize), dtype=np.float32)
        elif init == "identity":
            if in_channels != out_channels:
                raise ConfigurationError("identity init requires matching channel counts")
            w = _delta_kernel(in_channels, ksize)
        else:
            raise ConfigurationError(f"unknown conv init '{init}'")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight.tensor, self.bias.tensor, stride=self.stride, padding=self.padding)

    def signature(self) -> tuple:
        return ("conv", self.in_channels, self.out_channels, self.ksize, self.stride, self.padding)


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator | None = None,
        init: str = "he",
    ):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if init == "he":
            if rng is None:
                raise ConfigurationError("he init requires an rng")
            w = he_normal(rng, (in_features, out_features), in_features)
        elif init == "zero":
            w = np.zeros((in_features, out_features), dtype=np.float32)
        else:
            raise ConfigurationError(f"unknown linear init '{init}'")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight.tensor) + self.bias.tensor


class MidBlock(Module):
    """Residual 3x3 conv pair at constant width: x + conv2(silu(conv1(silu(x)))).

    With ``zero_residual`` the second conv starts at zero, so a freshly added
    block is an exact identity while still receiving gradient.
    """

    def __init__(self, channels: int, rng: np.random.Generator, zero_residual: bool = False):
        super().__init__()
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, rng=rng)
        self.conv2 = Conv2d(channels, channels, rng=rng, init="zero" if zero_residual else "he")

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(T.silu(self.conv1(T.silu(x))))

    def signature(self) -> tuple:
        return ("mid_block", self.channels, self.conv1.signature()[1:], self.conv2.signature()[1:])


class UpStage(Module):
    """Nearest-neighbor 2x upsample followed by a 3x3 conv and SiLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.scale = 2
        self.conv = Conv2d(in_channels, out_channels, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.silu(self.conv(T.upsample_nearest2x(x)))


class RefineStage(Module):
    """Resolution-preserving 3x3 conv and SiLU (the final decoder stage)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.scale = 1
        self.conv = Conv2d(channels, channels, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.silu(self.conv(x))


class UpDownPair(Module):
    """Added up/down layer pair: 2x nearest upsample + 3x3 conv, then a
    stride-2 3x3 conv back down.  Net resolution change is 1x.

    Both convs start as exact delta kernels, so the pair is an exact identity
    at initialization (the stride-2 conv taps the top-left pixel of each
    duplicated 2x2 block).
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.scale = 1
        self.up_conv = Conv2d(channels, channels, init="identity")
        self.down_conv = Conv2d(channels, channels, stride=2, init="identity")

    def __call__(self, x: Tensor) -> Tensor:
        return self.down_conv(self.up_conv(T.upsample_nearest2x(x)))


class FuserLayer(Module):
    """Key-conditioned depthwise residual: F' = DepthwiseConv_{W(K)}(F) + F.

    The key enters as a bipolar vector, is linearly embedded, and a two-layer
    perceptron generates one 3x3 kernel and one bias per feature channel.
    Both generator heads start at zero, so an untrained fuser passes features
    through exactly and carries no key information.  The generated kernels
    depend on the key only, never on the features.
    """

    KEY_BITS = 128

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        embed_dim: int = 256,
        hidden_dim: int = 128,
    ):
        super().__init__()
        self.channels = channels
        self.embed = Linear(self.KEY_BITS, embed_dim, rng=rng)
        self.gen_hidden = Linear(embed_dim, hidden_dim, rng=rng)
        self.gen_kernel = Linear(hidden_dim, channels * 9, init="zero")
        self.gen_bias = Linear(hidden_dim, channels, init="zero")

    def __call__(self, features: Tensor, key_vec: Tensor) -> Tensor:
        if features.data.ndim != 4 or features.data.shape[1] != self.channels:
            raise ConfigurationError(
                f"fuser expects NCHW features with {self.channels} channels, got shape {features.data.shape}"
            )
        if key_vec.data.shape != (1, self.KEY_BITS):
            raise ConfigurationError(f"fuser key vector must have shape (1, {self.KEY_BITS}), got {key_vec.data.shape}")
        h = T.silu(self.gen_hidden(self.embed(key_vec)))
        kernels = self.gen_kernel(h).reshape(self.channels, 3, 3)
        bias = self.gen_bias(h).reshape(self.channels)
        dyn = T.depthwise_conv2d(features, kernels, bias, padding=1)
        return dyn + features
