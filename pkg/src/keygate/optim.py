"""AdamW with decoupled weight decay and global gradient-norm clipping."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import TrainingError
from .nn import Parameter


def global_grad_norm(params: Sequence[Parameter]) -> float:
    """L2 norm over the concatenation of all gradients."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_global_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most max_norm.

    Returns the pre-clip norm.  Gradients below the bound are left untouched
    (no epsilon fudge), so clipping is exactly the identity in that case.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.tensor.grad = p.grad * scale
    return norm


class AdamW:
    """Decoupled-weight-decay Adam over the non-frozen parameters.

    Frozen parameters passed to the constructor are skipped entirely: no
    moment state is allocated for them and ``step`` never rewrites their
    arrays.  A trainable parameter with no gradient at ``step`` time is a
    contract violation and raises :class:`TrainingError`.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 5e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clip_norm: float | None = 1.0,
    ):
        all_params = list(params)
        self.params = [p for p in all_params if not p.frozen]
        self.frozen_params = [p for p in all_params if p.frozen]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        for p in self.params:
            if p.frozen:
                raise TrainingError(f"parameter {p.name or '<unnamed>'} was frozen after optimizer construction")
            if p.grad is None:
                raise TrainingError(f"missing gradient for trainable parameter {p.name or '<unnamed>'}")
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
        norm = global_grad_norm(self.params)
        if self.clip_norm is not None:
            clip_global_norm(self.params, self.clip_norm)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.tensor.data = (p.data - self.lr * update).astype(p.data.dtype, copy=False)
        return norm
