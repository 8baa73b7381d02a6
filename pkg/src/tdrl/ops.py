"""Network operators on :class:`~tdrl.tensor.Tensor` with hand-written backward rules.

Video tensors use the ``[N, T, C, H, W]`` layout; image tensors ``[N, C, H, W]``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, add, concat, matmul, relu, sigmoid  # noqa: F401  (re-exported)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation without bias.

    Kernel windows are gathered per sample into a ``[C*k*k, H'*W']`` block and
    contracted against the kernel with one batched GEMM, so the result lands
    directly in NCHW order.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, k, k2 = weight.shape
    if wc_in != c_in:
        raise ValueError(f"conv2d: input {x.shape} has {c_in} channels but weight {weight.shape} expects {wc_in}")
    if k != k2 or k < 1:
        raise ValueError(f"conv2d: kernel must be square and non-empty, got {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: bad stride={stride} / pad={pad}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {x.shape} (pad={pad})")
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1

    xd, wd = x.data, weight.data
    need_gx = x.requires_grad
    if k == 1 and pad == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = np.ascontiguousarray(xs).reshape(n, c_in, h_out * w_out)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
        # [N, C, k, k, H', W'] so each sample is one (C*k*k, H'*W') GEMM operand
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c_in * k * k, h_out * w_out)
    wmat = wd.reshape(c_out, c_in * k * k)
    out = np.matmul(wmat, cols).reshape(n, c_out, h_out, w_out)

    def backward(g):
        g3 = g.reshape(n, c_out, h_out * w_out)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if not need_gx:
            return None, gw
        gcols = np.matmul(wmat.T, g3)
        if k == 1 and pad == 0:
            gxs = gcols.reshape(n, c_in, h_out, w_out)
            if stride == 1:
                return gxs, gw
            gx = np.zeros_like(xd)
            gx[:, :, ::stride, ::stride] = gxs
            return gx, gw
        gcols = gcols.reshape(n, c_in, k, k, h_out, w_out)
        gxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gw

    return Tensor._from_op(out, (x, weight), backward, "conv2d")


def depthwise_temporal_conv(x: Tensor, weight: Tensor) -> Tensor:
    """Per-channel 1-D convolution along T with zero padding (k_t - 1) / 2."""
    if x.ndim != 5:
        raise ValueError(f"depthwise_temporal_conv expects [N,T,C,H,W], got {x.shape}")
    n, t, c, h, w = x.shape
    if weight.ndim != 2 or weight.shape[0] != c:
        raise ValueError(f"depthwise_temporal_conv: weight {weight.shape} does not match {c} channels")
    kt = weight.shape[1]
    if kt % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {kt}")
    if kt > 2 * t + 1:
        raise ValueError(f"temporal kernel size {kt} exceeds 2T+1 = {2 * t + 1}")
    p = (kt - 1) // 2
    xd, wd = x.data, weight.data
    # tap j reads frame t + j - p; taps falling off either end see zero padding
    out = xd * wd[:, p][:, None, None]
    for j in range(kt):
        s = j - p
        if s == 0 or abs(s) >= t:
            continue
        dst, src = (slice(0, t - s), slice(s, t)) if s > 0 else (slice(-s, t), slice(0, t + s))
        out[:, dst] += xd[:, src] * wd[:, j][:, None, None]

    def backward(g):
        gx = g * wd[:, p][:, None, None]
        gw = np.zeros_like(wd)
        g_c = g.transpose(2, 0, 1, 3, 4)
        x_c = xd.transpose(2, 0, 1, 3, 4)
        for j in range(kt):
            s = j - p
            if abs(s) >= t:
                continue
            dst, src = (slice(0, t - s), slice(s, t)) if s > 0 else (slice(-s, t), slice(0, t + s))
            if s != 0:
                gx[:, src] += g[:, dst] * wd[:, j][:, None, None]
            gw[:, j] = (g_c[:, :, dst] * x_c[:, :, src]).reshape(c, -1).sum(axis=1)
        return gx, gw

    return Tensor._from_op(out, (x, weight), backward, "depthwise_temporal_conv")


def temporal_shift(x: Tensor, fold_fraction: float = 0.125) -> Tensor:
    """Shift the first fold of channels forward in time and the next fold backward."""
    if not 0 < fold_fraction <= 0.5:
        raise ValueError(f"fold_fraction must be in (0, 0.5], got {fold_fraction}")
    if x.ndim != 5:
        raise ValueError(f"temporal_shift expects [N,T,C,H,W], got {x.shape}")
    c = x.shape[2]
    fold = int(np.floor(c * fold_fraction))
    xd = x.data
    out = xd.copy()
    if fold:
        out[:, :, : 2 * fold] = 0
        out[:, 1:, :fold] = xd[:, :-1, :fold]
        out[:, :-1, fold : 2 * fold] = xd[:, 1:, fold : 2 * fold]

    def backward(g):
        gx = g.copy()
        if fold:
            gx[:, :, : 2 * fold] = 0
            gx[:, :-1, :fold] = g[:, 1:, :fold]
            gx[:, 1:, fold : 2 * fold] = g[:, :-1, fold : 2 * fold]
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "temporal_shift")


def global_avg_pool_spatial(x: Tensor) -> Tensor:
    """Mean over the trailing two (spatial) axes."""
    if x.ndim < 3:
        raise ValueError(f"global_avg_pool_spatial needs spatial axes, got {x.shape}")
    shape = x.shape
    hw = shape[-1] * shape[-2]

    def backward(g):
        return (np.broadcast_to((g / hw)[..., None, None], shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=(-2, -1)), (x,), backward, "global_avg_pool_spatial")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalise ``[N,C,H,W]`` over channel groups and space, then apply a per-channel affine."""
    if x.ndim != 4:
        raise ValueError(f"group_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"group_norm: {groups} groups / affine {gamma.shape} incompatible with {x.shape}")
    xd = x.data
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = (xc * inv).reshape(xd.shape)
    gd, bd = gamma.data[:, None, None], beta.data[:, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gh = (g * gd).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
        return gx.reshape(xd.shape), ggamma, gbeta

    return Tensor._from_op(xhat * gd + bd, (x, gamma, beta), backward, "group_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis; ``weight`` is ``[D_out, D_in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    wt = transpose_2d(weight)
    y = matmul(x, wt)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        y = add(y, bias)
    return y


def transpose_2d(w: Tensor) -> Tensor:
    def backward(g):
        return (g.T,)

    return Tensor._from_op(w.data.T, (w,), backward, "transpose")


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """``out[n,t,c,h,w] = x[n,t,c,h,w] * scale[n,t,c]``."""
    if x.ndim != 5 or scale.shape != x.shape[:3]:
        raise ValueError(f"channel_scale: scale {scale.shape} does not match leading dims of {x.shape}")
    xd, sd = x.data, scale.data
    s5 = sd[..., None, None]

    def backward(g):
        return g * s5, (g * xd).reshape(*sd.shape, -1).sum(axis=-1)

    return Tensor._from_op(xd * s5, (x, scale), backward, "channel_scale")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}], got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsum - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return Tensor._from_op(loss, (logits,), backward, "softmax_cross_entropy")
