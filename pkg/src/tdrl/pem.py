"""Progressive Enhancement Module.

Per-frame channel statistics are differenced between neighbouring frames,
accumulated into a gated memory, and turned into a sigmoid enhancement vector
that rescales each frame's channels.

Indexing is 0-based throughout: ``d[:, t]`` for ``t < T-1`` is the difference
between frames ``t+1`` and ``t``; the extra slot ``d[:, T-1]`` is the constant
all-ones vector that closes the sequence.  The default memory initialisation
("last_diff") is ``d[:, T-2]``, the last *real* difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import channel_scale, global_avg_pool_spatial, linear
from .tensor import Tensor, concat, relu, sigmoid, stack

MEMORY_INITS = ("last_diff", "first_diff", "ones", "zeros")


@dataclass
class PemParams:
    f1: Tensor  # [C/r, C], applied to frame t
    f2: Tensor  # [C/r, C], applied to frame t+1
    gate: Tensor  # [1, 2*C/r]
    expand: Tensor  # [C, C/r]

    def __post_init__(self):
        cr, c = self.f1.shape
        if self.f2.shape != (cr, c):
            raise ValueError(f"f2 shape {self.f2.shape} != f1 shape {self.f1.shape}")
        if self.gate.shape != (1, 2 * cr):
            raise ValueError(f"gate must be [1, {2 * cr}], got {self.gate.shape}")
        if self.expand.shape != (c, cr):
            raise ValueError(f"expand must be [{c}, {cr}], got {self.expand.shape}")
        if c % cr:
            raise ValueError(f"reduced width {cr} does not divide channel count {c}")

    @property
    def channels(self) -> int:
        return self.f1.shape[1]

    @property
    def reduced(self) -> int:
        return self.f1.shape[0]

    @classmethod
    def init(cls, channels: int, reduction: int, rng: np.random.Generator, dtype=np.float32) -> "PemParams":
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction {reduction} must be >= 1 and divide {channels}")
        cr = channels // reduction

        def w(shape, fan_in):
            return Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), shape).astype(dtype), requires_grad=True)

        return cls(w((cr, channels), channels), w((cr, channels), channels), w((1, 2 * cr), 2 * cr), w((channels, cr), cr))

    @classmethod
    def zeros(cls, channels: int, reduction: int = 1, dtype=np.float32) -> "PemParams":
        cr = channels // reduction

        def z(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        return cls(z((cr, channels)), z((cr, channels)), z((1, 2 * cr)), z((channels, cr)))

    def tensors(self) -> dict[str, Tensor]:
        return {"f1": self.f1, "f2": self.f2, "gate": self.gate, "expand": self.expand}


def frame_diffs(stats: Tensor, params: PemParams) -> Tensor:
    """``[N,T,C]`` statistics -> ``[N,T,C/r]`` differences with a trailing ones slot."""
    if stats.ndim != 3:
        raise ValueError(f"frame_diffs expects [N,T,C], got {stats.shape}")
    n, t, c = stats.shape
    if t < 2:
        raise ValueError(f"frame_diffs needs T >= 2, got T={t}")
    if c != params.channels:
        raise ValueError(f"stats have {c} channels, PEM expects {params.channels}")
    prev = relu(linear(stats[:, :-1], params.f1))
    nxt = relu(linear(stats[:, 1:], params.f2))
    ones = Tensor(np.ones((n, 1, params.reduced), dtype=stats.dtype))
    return concat([nxt - prev, ones], axis=1)


def memory_step(m_prev: Tensor, d_t: Tensor, params: PemParams) -> tuple[Tensor, Tensor]:
    """One gated accumulation step; returns ``(m_t, gamma)``.

    Works on single vectors ``[C/r]`` or batches ``[N, C/r]``; gamma is one
    scalar per sample.
    """
    if m_prev.shape != d_t.shape or m_prev.shape[-1] != params.reduced:
        raise ValueError(f"memory_step: m {m_prev.shape} / d {d_t.shape} vs reduced width {params.reduced}")
    gamma = sigmoid(linear(concat([m_prev, d_t], axis=-1), params.gate))
    # (1-g)*m + g*d is exact at g = 0.5; the hull clip makes m == d a fixed point
    return _clip_to_hull((1.0 - gamma) * m_prev + gamma * d_t, m_prev, d_t), gamma


def _clip_to_hull(r: Tensor, a: Tensor, b: Tensor) -> Tensor:
    # rounding in m + g*(d - m) can land one ulp outside [min(m,d), max(m,d)];
    # clip that away and pass the gradient straight through
    lo, hi = np.minimum(a.data, b.data), np.maximum(a.data, b.data)
    return Tensor._from_op(np.clip(r.data, lo, hi), (r,), lambda g: (g,), "hull_clip")


def enhancement(m_t: Tensor, params: PemParams) -> Tensor:
    return sigmoid(linear(m_t, params.expand))


def initial_memory(d: Tensor, mode: str = "last_diff") -> Tensor:
    t = d.shape[1]
    if mode == "last_diff":
        return d[:, t - 2]
    if mode == "first_diff":
        return d[:, 0]
    if mode == "ones":
        return d[:, t - 1]
    if mode == "zeros":
        return Tensor(np.zeros((d.shape[0], d.shape[2]), dtype=d.dtype))
    raise ValueError(f"unknown memory init {mode!r}; expected one of {MEMORY_INITS}")


def pem_recurrence(d: Tensor, params: PemParams, memory_init: str = "last_diff"):
    """Run the memory over all T slots; returns lists ``(memories, gammas)``."""
    m = initial_memory(d, memory_init)
    memories, gammas = [], []
    for t in range(d.shape[1]):
        m, g = memory_step(m, d[:, t], params)
        memories.append(m)
        gammas.append(g)
    return memories, gammas


def pem_forward(x: Tensor, params: PemParams, memory_init: str = "last_diff") -> tuple[Tensor, Tensor]:
    """Enhance ``[N,T,C,H,W]`` features; returns ``(U, A)`` with ``A`` of shape ``[N,T,C]``."""
    if x.ndim != 5:
        raise ValueError(f"pem_forward expects [N,T,C,H,W], got {x.shape}")
    stats = global_avg_pool_spatial(x)
    d = frame_diffs(stats, params)
    memories, _ = pem_recurrence(d, params, memory_init)
    a = enhancement(stack(memories, axis=1), params)
    return channel_scale(x, a), a
