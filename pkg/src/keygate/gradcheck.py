"""Finite-difference verification of the autodiff engine.

``grad_check`` compares analytic gradients against central differences in
float64.  ``standard_op_suite`` yields randomized cases covering every
differentiable op so the whole engine can be swept in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    max_rel_error: float
    worst_input: int
    worst_element: int
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures and np.isfinite(self.max_rel_error)


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    # Relative where gradients are large, absolute where they are tiny.
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def grad_check(
    function: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-5,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Check d(function)/d(inputs) against central finite differences.

    `function` must map Tensors to a scalar Tensor and be pure.  Inputs must
    be float64; float32 has too little headroom for the difference quotient.
    """
    if names is None:
        names = [f"input[{i}]" for i in range(len(inputs))]
    arrays = []
    for i, arr in enumerate(inputs):
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            raise ConfigurationError(f"grad_check requires float64 inputs, {names[i]} has dtype {arr.dtype}")
        arrays.append(arr.copy())

    tensors = [Tensor(a, requires_grad=True, name=n) for a, n in zip(arrays, names)]
    out = function(*tensors)
    if out.data.size != 1:
        raise ConfigurationError(f"grad_check target must return a scalar, got shape {out.shape}")
    out.backward()

    failures: list[str] = []
    analytic: list[np.ndarray] = []
    for t, n in zip(tensors, names):
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            failures.append(f"non-finite analytic gradient for {n}")
        analytic.append(np.asarray(g, dtype=np.float64))

    def eval_at(arrs: list[np.ndarray]) -> float:
        return function(*[Tensor(a) for a in arrs]).item()

    max_err = 0.0
    worst = (0, 0)
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            hi = eval_at(arrays)
            flat[j] = orig - epsilon
            lo = eval_at(arrays)
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2.0 * epsilon)
        if not np.all(np.isfinite(numeric)):
            failures.append(f"non-finite numeric gradient for {names[i]}")
            continue
        err = _rel_error(analytic[i], numeric)
        peak = float(err.max()) if err.size else 0.0
        if peak > max_err:
            max_err = peak
            worst = (i, int(np.argmax(err)))
    return GradCheckReport(max_rel_error=max_err, worst_input=worst[0], worst_element=worst[1], failures=failures)


def _away_from_kinks(arr: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Nudge entries away from 0 so relu/abs stay locally linear under +/- eps."""
    sign = np.where(arr >= 0, 1.0, -1.0)
    return np.where(np.abs(arr) < margin, arr + sign * 2 * margin, arr)


def standard_op_suite(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray]]]:
    """Randomized (name, function, inputs) cases covering all differentiable ops.

    Shapes are small on purpose: central differences evaluate the function
    twice per element.
    """
    rng = np.random.default_rng(seed)

    def arr(*shape, kink_safe=False, positive=False):
        a = rng.standard_normal(shape)
        if positive:
            a = np.abs(a) + 0.5
        if kink_safe:
            a = _away_from_kinks(a)
        return a

    cases: list[tuple[str, Callable[..., Tensor], list[np.ndarray]]] = []

    def case(name, fn, inputs):
        cases.append((name, fn, inputs))

    for k in range(3):
        s = (2 + k, 3)
        case(f"add_{k}", lambda a, b: (a + b).mean(), [arr(*s), arr(*s)])
        case(f"sub_{k}", lambda a, b: (a - b).mean(), [arr(*s), arr(*s)])
        case(f"mul_{k}", lambda a, b: (a * b).mean(), [arr(*s), arr(*s)])
    case("add_broadcast_row", lambda a, b: (a + b).sum(), [arr(3, 4), arr(1, 4)])
    case("mul_broadcast_chan", lambda a, b: (a * b).sum(), [arr(2, 3, 4, 4), arr(1, 3, 1, 1)])
    case("add_scalar_tensor", lambda a, b: (a + b).mean(), [arr(4, 3), arr()])
    case("neg", lambda a: (-a).sum(), [arr(5)])
    case("square", lambda a: (a ** 2.0).mean(), [arr(4, 4)])
    case("cube", lambda a: (a ** 3.0).mean(), [arr(3, 3)])
    case("abs", lambda a: T.absolute(a).mean(), [arr(4, 5, kink_safe=True)])
    case("sqrt", lambda a: T.sqrt(a).mean(), [arr(3, 4, positive=True)])
    case("exp", lambda a: T.exp(a).mean(), [arr(3, 3)])
    case("sigmoid", lambda a: T.sigmoid(a).mean(), [arr(4, 4)])
    case("silu", lambda a: T.silu(a).mean(), [arr(4, 4)])
    case("relu", lambda a: T.relu(a).mean(), [arr(4, 5, kink_safe=True)])
    case("reshape", lambda a: (a.reshape(6, 2) ** 2.0).mean(), [arr(3, 4)])
    case("sum", lambda a: a.sum(), [arr(2, 3, 2)])
    case("mean", lambda a: a.mean(), [arr(7,)])
    for k, (n, m, p) in enumerate([(2, 3, 4), (3, 3, 3), (1, 5, 2)]):
        case(f"matmul_{k}", lambda a, b: T.matmul(a, b).mean(), [arr(n, m), arr(m, p)])
    case("matmul_chain", lambda a, b, c: T.matmul(T.matmul(a, b), c).sum(), [arr(2, 3), arr(3, 4), arr(4, 2)])

    case("div_scalar", lambda a: (a / 3.0).sum(), [arr(3, 4)])
    case("mean_of_product", lambda a, b, c: ((a * b) * c).mean(), [arr(2, 3), arr(2, 3), arr(2, 3)])

    conv_shapes = [
        # (N, C, H, W, O, k, stride, pad)
        (1, 1, 4, 4, 1, 3, 1, 1),
        (2, 2, 5, 5, 3, 3, 1, 1),
        (1, 3, 6, 6, 2, 3, 2, 1),
        (2, 2, 4, 4, 2, 1, 1, 0),
        (1, 2, 7, 7, 2, 3, 2, 0),
        (1, 4, 4, 4, 3, 3, 1, 2),
        (3, 1, 5, 5, 2, 5, 1, 2),
        (1, 3, 8, 8, 1, 3, 2, 1),
    ]
    for k, (n, c, h, w, o, ks, st, pd) in enumerate(conv_shapes):
        case(
            f"conv2d_{k}",
            lambda x, wt, b, st=st, pd=pd: T.conv2d(x, wt, b, stride=st, padding=pd).mean(),
            [arr(n, c, h, w), arr(o, c, ks, ks), arr(o)],
        )
    case(
        "conv2d_nobias",
        lambda x, wt: T.conv2d(x, wt, stride=1, padding=1).mean(),
        [arr(1, 2, 4, 4), arr(2, 2, 3, 3)],
    )
    for k, (n, c, h, w, ks, pd) in enumerate([(1, 2, 4, 4, 3, 1), (2, 3, 5, 5, 3, 1), (1, 1, 4, 4, 1, 0)]):
        case(
            f"depthwise_{k}",
            lambda x, wt, b, pd=pd: T.depthwise_conv2d(x, wt, b, padding=pd).mean(),
            [arr(n, c, h, w), arr(c, ks, ks), arr(c)],
        )
    case(
        "depthwise_generated_weight",
        lambda x, v, wg: T.depthwise_conv2d(x, T.matmul(v, wg).reshape(2, 3, 3), padding=1).mean(),
        [arr(1, 2, 4, 4), arr(1, 4), arr(4, 18)],
    )
    case(
        "fuser_like_residual",
        lambda x, v, wg, bg: (
            T.depthwise_conv2d(x, T.matmul(T.silu(v), wg).reshape(2, 3, 3), T.matmul(T.silu(v), bg).reshape(2), padding=1)
            + x
        ).mean(),
        [arr(1, 2, 4, 4), arr(1, 4), arr(4, 18), arr(4, 2)],
    )
    case(
        "perceptual_like",
        lambda a, b, w: (
            (T.silu(T.conv2d(a, w, stride=2, padding=1)) - T.silu(T.conv2d(b, w, stride=2, padding=1))) ** 2.0
        ).mean(),
        [arr(1, 2, 4, 4), arr(1, 2, 4, 4), arr(3, 2, 3, 3)],
    )
    case("upsample2x", lambda x: (T.upsample_nearest2x(x) ** 2.0).mean(), [arr(2, 2, 3, 3)])
    case("avgpool2x", lambda x: (T.avgpool2x(x) ** 2.0).mean(), [arr(2, 2, 4, 4)])
    case("up_down_roundtrip", lambda x: T.avgpool2x(T.upsample_nearest2x(x)).sum(), [arr(1, 2, 3, 3)])
    case(
        "residual_block",
        lambda x, w1, w2: (x + T.conv2d(T.silu(T.conv2d(x, w1, padding=1)), w2, padding=1)).mean(),
        [arr(1, 2, 4, 4), arr(2, 2, 3, 3), arr(2, 2, 3, 3)],
    )
    case(
        "mae_composite",
        lambda a, b: T.absolute(a - b).mean(),
        [arr(2, 3, 4, 4, kink_safe=True), np.zeros((2, 3, 4, 4))],
    )
    case(
        "hinge_composite",
        lambda a, b: T.relu(0.5 - T.absolute(a - b).mean()).sum(),
        [arr(2, 2, 3, 3, kink_safe=True), np.full((2, 2, 3, 3), 5.0)],
    )
    return cases


def run_op_suite(seed: int = 0, tolerance: float = 1e-6) -> list[tuple[str, float]]:
    """Run every suite case; returns (name, max_rel_error) sorted worst-first."""
    results = []
    for name, fn, inputs in standard_op_suite(seed):
        report = grad_check(fn, inputs)
        if report.failures:
            results.append((name, float("inf")))
        else:
            results.append((name, report.max_rel_error))
    results.sort(key=lambda t: -t[1])
    return results
