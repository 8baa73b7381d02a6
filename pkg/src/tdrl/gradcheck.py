"""Central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NondeterministicFunctionError(RuntimeError):
    pass


def _as_list(inputs) -> list[Tensor]:
    return [inputs] if isinstance(inputs, Tensor) else list(inputs)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-3,
    dtype=np.float64,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backward() against central differences of ``f``.

    ``f`` receives one tensor per entry of ``inputs`` and must return a scalar.
    Everything is re-run in ``dtype`` (float64 by default).  Returns the largest
    ``|a - b| / max(|a|, |b|, 1e-8)`` over checked coordinates.  With
    ``max_coords`` only a random subset of coordinates per input is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = [np.array(t.data, dtype=dtype) for t in _as_list(inputs)]

    def evaluate(arrays: list[np.ndarray]) -> float:
        out = f(*[Tensor(a) for a in arrays])
        if out.size != 1:
            raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
        return float(out.data)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in base]
    out = f(*leaves)
    if out.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    f0 = float(out.data)
    if evaluate(base) != f0 or evaluate(base) != f0:
        raise NondeterministicFunctionError("f returned different values for identical inputs")

    worst = 0.0
    for arr, leaf in zip(base, leaves):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(arr.size, max_coords, replace=False)
        flat = arr.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate(base)
            flat[i] = orig - eps
            fm = evaluate(base)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# -- standard suite ------------------------------------------------------------------


@dataclass
class Check:
    name: str
    fn: Callable[..., Tensor]
    inputs: list[Tensor]
    tol: float
    eps: float


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


# central differences are exact on polynomials of degree <= 2, so ops that are
# at most quadratic in their inputs are held to a much tighter bound
POLY_TOL = 1e-6
SMOOTH_TOL = 1e-3


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def standard_checks(seed: int = 0) -> list[Check]:
    """Every differentiable operator plus a composed PEM -> TM -> ResConv block, on tiny shapes."""
    from . import ops, tensor as T
    from .backbone import BlockSpec, NetworkConfig, block_forward, init_params
    from .pem import PemParams, pem_forward
    from .tdloss import TdConfig, td_loss

    rng = np.random.default_rng(seed)

    def t(*shape, low=None):
        a = rng.standard_normal(shape)
        if low is not None:  # keep away from kinks / singularities
            a = np.sign(a) * (np.abs(a) + low)
        return Tensor(a)

    def pos(*shape):
        return Tensor(rng.uniform(0.5, 2.0, shape))

    def unary(name, op, x, tol, eps=1e-3):
        w = rng.standard_normal(op(x).shape)
        return Check(name, lambda a: _project(op(a), w), [x], tol, eps)

    def binary(name, op, a, b, tol, eps=1e-3):
        w = rng.standard_normal(op(a, b).shape)
        return Check(name, lambda p, q: _project(op(p, q), w), [a, b], tol, eps)

    checks = [
        binary("add", T.add, t(3, 4), t(4), POLY_TOL),
        binary("sub", T.sub, t(3, 4), t(3, 1), POLY_TOL),
        binary("mul", T.mul, t(2, 3), t(2, 3), POLY_TOL),
        binary("div", T.div, t(2, 3), pos(2, 3), SMOOTH_TOL, 1e-5),
        unary("sigmoid", T.sigmoid, t(3, 4), SMOOTH_TOL, 1e-5),
        unary("relu", T.relu, t(3, 4, low=0.01), POLY_TOL),
        unary("square", T.square, t(3, 4), POLY_TOL),
        unary("sqrt", T.sqrt, pos(3, 4), SMOOTH_TOL, 1e-5),
        unary("log", T.log, pos(3, 4), SMOOTH_TOL, 1e-5),
        unary("sum", lambda x: T.sum_(x, axis=1), t(3, 4), POLY_TOL),
        unary("mean", lambda x: T.mean(x, axis=(0, 2), keepdims=True), t(2, 3, 4), POLY_TOL),
        unary("reshape", lambda x: T.reshape(x, (4, 6)), t(2, 3, 4), POLY_TOL),
        unary("transpose", lambda x: T.transpose(x, (2, 0, 1)), t(2, 3, 4), POLY_TOL),
        unary("getitem", lambda x: T.getitem(x, (slice(None), [0, 2, 2])), t(2, 3), POLY_TOL),
        binary("concat", lambda a, b: T.concat([a, b], axis=1), t(2, 3), t(2, 2), POLY_TOL),
        binary("stack", lambda a, b: T.stack([a, b], axis=1), t(2, 3), t(2, 3), POLY_TOL),
        binary("matmul", T.matmul, t(2, 3, 4), t(4, 5), POLY_TOL),
        binary("conv2d", lambda x, w: ops.conv2d(x, w, 1, 1), t(2, 3, 5, 5), t(4, 3, 3, 3), POLY_TOL),
        binary("conv2d_strided", lambda x, w: ops.conv2d(x, w, 2, 0), t(1, 2, 6, 5), t(3, 2, 3, 3), POLY_TOL),
        binary("conv2d_1x1", lambda x, w: ops.conv2d(x, w, 2, 0), t(2, 3, 4, 4), t(2, 3, 1, 1), POLY_TOL),
        binary("depthwise_temporal_conv", ops.depthwise_temporal_conv, t(2, 4, 3, 2, 2), t(3, 3), POLY_TOL),
        unary("temporal_shift", lambda x: ops.temporal_shift(x, 0.25), t(2, 3, 4, 2, 2), POLY_TOL),
        unary("global_avg_pool_spatial", ops.global_avg_pool_spatial, t(2, 3, 4, 3), POLY_TOL),
        binary("linear", lambda x, w: ops.linear(x, w), t(3, 4), t(2, 4), POLY_TOL),
        binary("channel_scale", ops.channel_scale, t(2, 3, 4, 2, 2), t(2, 3, 4), POLY_TOL),
    ]
    gn_w = rng.standard_normal((2, 4, 3, 3))
    checks.append(Check(
        "group_norm",
        lambda x, g, b: _project(ops.group_norm(x, g, b, 2), gn_w),
        [t(2, 4, 3, 3), pos(4), t(4)],
        SMOOTH_TOL, 1e-5,
    ))
    labels = np.array([0, 2, 1])
    checks.append(Check(
        "softmax_cross_entropy", lambda z: ops.softmax_cross_entropy(z, labels), [t(3, 4)], SMOOTH_TOL, 1e-5
    ))
    td_cfg = TdConfig(ratio=0.75)
    checks.append(Check("td_loss", lambda z: td_loss(z, td_cfg), [t(2, 3, 4, 2, 3)], SMOOTH_TOL, 1e-5))

    pem = PemParams.init(4, 2, rng, np.float64)
    pem_w = rng.standard_normal((2, 3, 4, 2, 2))
    checks.append(Check(
        "pem_forward",
        lambda x, f1, f2, g, e: _project(pem_forward(x, PemParams(f1, f2, g, e))[0], pem_w),
        [t(2, 3, 4, 2, 2), *pem.tensors().values()],
        SMOOTH_TOL, 1e-5,
    ))

    spec = BlockSpec(id=0, channels_in=4, channels_out=8, spatial_stride=2, use_pem=True,
                     tm_kind="depthwise_temporal", td_regularized=True)
    net = NetworkConfig(T=3, stem_channels=4, blocks=(spec,), td=TdConfig(regularized_blocks=frozenset({0})),
                        pem_reduction=2, bottleneck_div=2, norm_groups=2)
    params = init_params(net, dtype=np.float64, seed=seed)
    names = [k for k in params if k.startswith("blocks.")]
    for k in names:  # conv3 starts at zero; randomise so every path carries gradient
        params[k] = Tensor(rng.normal(0.0, 0.5, params[k].shape))
    x_block = t(2, 3, 4, 4, 4)
    out_w = rng.standard_normal((2, 3, 8, 2, 2))

    def block(x, *ps):
        y, z = block_forward(x, spec, dict(zip(names, ps)), net)
        return _project(y, out_w) + td_loss(z, net.td)

    checks.append(Check("block_pem_tm_resconv", block, [x_block, *(params[k] for k in names)], SMOOTH_TOL, 1e-5))
    return checks


def run_checks(checks: Sequence[Check]) -> list[CheckResult]:
    return [CheckResult(c.name, grad_check(c.fn, c.inputs, eps=c.eps), c.tol) for c in checks]
