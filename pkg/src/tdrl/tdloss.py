"""Temporal diversity loss and the composite training objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ops import softmax_cross_entropy
from .tensor import NonFiniteError, Tensor, stack


@dataclass(frozen=True)
class TdConfig:
    ratio: float = 0.5
    eps: float = 1e-8
    lam: float = 2e-4
    regularized_blocks: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"td ratio must be in [0, 1], got {self.ratio}")
        if self.eps <= 0:
            raise ValueError(f"td eps must be positive, got {self.eps}")
        if self.lam < 0:
            raise ValueError(f"td lambda must be >= 0, got {self.lam}")
        object.__setattr__(self, "regularized_blocks", frozenset(self.regularized_blocks))

    def n_channels(self, channels: int) -> int:
        return int(np.floor(self.ratio * channels + 1e-9))


@dataclass
class LossBreakdown:
    total: Tensor
    cross_entropy: Tensor
    td_terms: dict[int, Tensor]

    @property
    def td_sum(self) -> float:
        return float(sum(float(v.data) for v in self.td_terms.values()))


class LossComponentError(FloatingPointError):
    def __init__(self, component: str, cause: Exception):
        super().__init__(f"non-finite value in {component}: {cause}")
        self.component = component


def _pairwise_cosine(z: Tensor, eps: float) -> Tensor:
    """Mean cosine over ordered frame pairs ``i != j``.

    ``z`` is ``[N, T, C, D]`` (D = flattened spatial map); returns ``[N, C]``.
    Norms are floored at ``eps``; the similarity is clamped to [-1, 1] with the
    clamp treated as identity in the backward pass (it only trims rounding).
    """
    zd = z.data
    n, t, c, dim = zd.shape
    norms = np.sqrt(np.einsum("ntcd,ntcd->ntc", zd, zd))
    denom = np.maximum(norms, eps)
    u = zd / denom[..., None]
    gram = np.einsum("ntcd,nscd->ncts", u, u)
    gram = np.clip(gram, -1.0, 1.0)
    pairs = t * (t - 1)
    diag = np.einsum("nctt->nc", gram)
    out = ((gram.sum(axis=(2, 3)) - diag) / pairs).astype(zd.dtype)

    def backward(g):
        # d out / d u_i = (2 / pairs) * sum_{j != i} u_j
        s = u.sum(axis=1, keepdims=True)
        gu = (2.0 / pairs) * g[:, None, :, None] * (s - u)
        radial = np.einsum("ntcd,ntcd->ntc", gu, u)
        above = (norms > eps)[..., None]
        gz = np.where(above, (gu - radial[..., None] * u), gu) / denom[..., None]
        return (gz.astype(zd.dtype, copy=False),)

    return Tensor._from_op(out, (z,), backward, "pairwise_cosine")


def cosine_sim(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of two equal-length vectors, clamped to [-1, 1]."""
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"cosine_sim expects equal-length vectors, got {u.shape} and {v.shape}")
    z = stack([u, v], axis=0).reshape(1, 2, 1, u.shape[0])
    return _pairwise_cosine(z, eps).reshape(())


def _select(z: Tensor, cfg: TdConfig) -> Tensor | None:
    if z.ndim != 5:
        raise ValueError(f"td_loss expects [N,T,C,H,W], got {z.shape}")
    n, t, c, h, w = z.shape
    if t < 2:
        raise ValueError(f"td_loss needs T >= 2, got T={t}")
    c_mu = cfg.n_channels(c)
    if c_mu == 0:
        return None
    return z[:, :, :c_mu].reshape(n, t, c_mu, h * w)


def td_loss(z: Tensor, cfg: TdConfig) -> Tensor:
    """Sum over the first ``floor(ratio*C)`` channels of the mean pairwise frame cosine, averaged over N."""
    sel = _select(z, cfg)
    if sel is None:
        return Tensor(np.zeros((), dtype=z.dtype))
    return _pairwise_cosine(sel, cfg.eps).sum(axis=1).mean()


def similarity_matrix(z: np.ndarray, cfg: TdConfig) -> np.ndarray:
    """``T x T`` cosine matrix averaged over the regularized channels and the batch."""
    z = np.asarray(z, dtype=np.float64)
    n, t, c, h, w = z.shape
    c_mu = max(cfg.n_channels(c), 0)
    if c_mu == 0:
        return np.full((t, t), np.nan)
    v = z[:, :, :c_mu].reshape(n, t, c_mu, h * w)
    u = v / np.maximum(np.linalg.norm(v, axis=-1), cfg.eps)[..., None]
    gram = np.clip(np.einsum("ntcd,nscd->ncts", u, u), -1.0, 1.0)
    return gram.mean(axis=(0, 1))


def total_loss(
    logits: Tensor,
    labels,
    z_by_block: Mapping[int, Tensor],
    cfg: TdConfig,
) -> LossBreakdown:
    """Cross-entropy plus ``lam`` times the summed per-block diversity terms."""
    missing = sorted(b for b in cfg.regularized_blocks if b not in z_by_block)
    if missing:
        raise KeyError(f"no captured features for regularized block(s) {missing}")
    try:
        ce = softmax_cross_entropy(logits, labels)
    except NonFiniteError as exc:
        raise LossComponentError("cross_entropy", exc) from exc
    terms: dict[int, Tensor] = {}
    try:
        for b in sorted(cfg.regularized_blocks):
            terms[b] = td_loss(z_by_block[b], cfg)
    except NonFiniteError as exc:
        raise LossComponentError("td_loss", exc) from exc
    total = ce
    if terms and cfg.lam != 0.0:
        reg = terms[sorted(terms)[0]]
        for b in sorted(terms)[1:]:
            reg = reg + terms[b]
        total = ce + reg * cfg.lam
    return LossBreakdown(total=total, cross_entropy=ce, td_terms=terms)
