"""Small residual 2D-CNN video classifier.

Each block runs ``[PEM] -> TM -> ResConv`` on ``[N,T,C,H,W]`` features and adds
the result to a (possibly projected) shortcut.  ResConv is 1x1 -> 3x3 -> 1x1
convolutions applied frame by frame, GroupNorm + ReLU after the first two; the
last 1x1 starts at zero so a fresh block is an identity map.  The head pools space, averages frames, and applies
a linear classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .ops import conv2d, depthwise_temporal_conv, global_avg_pool_spatial, group_norm, linear, temporal_shift
from .pem import MEMORY_INITS, PemParams, pem_forward
from .tdloss import TdConfig
from .tensor import Tensor, relu

TM_KINDS = ("none", "shift", "depthwise_temporal")
POSITIONS = ("before_tm", "after_tm")

Params = dict[str, Tensor]


@dataclass(frozen=True)
class BlockSpec:
    id: int
    channels_in: int
    channels_out: int
    spatial_stride: int = 1
    use_pem: bool = False
    tm_kind: str = "depthwise_temporal"
    td_regularized: bool = False
    td_position: str = "after_tm"
    pem_position: str = "before_tm"

    def __post_init__(self):
        if self.tm_kind not in TM_KINDS:
            raise ValueError(f"block {self.id}: tm_kind must be one of {TM_KINDS}, got {self.tm_kind!r}")
        if self.td_position not in POSITIONS or self.pem_position not in POSITIONS:
            raise ValueError(f"block {self.id}: positions must be one of {POSITIONS}")
        if self.td_regularized and self.tm_kind == "none":
            raise ValueError(f"block {self.id}: TD regularization needs a temporal module")
        if self.channels_in < 1 or self.channels_out < 1 or self.spatial_stride < 1:
            raise ValueError(f"block {self.id}: bad channel/stride configuration")

    @property
    def needs_projection(self) -> bool:
        return self.channels_in != self.channels_out or self.spatial_stride != 1


@dataclass(frozen=True)
class NetworkConfig:
    T: int = 8
    K: int = 4
    c_img: int = 1
    stem_channels: int = 16
    stem_stride: int = 2
    blocks: tuple[BlockSpec, ...] = ()
    td: TdConfig = field(default_factory=TdConfig)
    seed: int = 0
    pem_reduction: int = 4
    pem_memory_init: str = "last_diff"
    tm_kernel: int = 3
    shift_fold: float = 0.125
    bottleneck_div: int = 4
    norm_groups: int = 4

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if self.pem_memory_init not in MEMORY_INITS:
            raise ValueError(f"pem_memory_init must be one of {MEMORY_INITS}")
        ids = [b.id for b in self.blocks]
        if ids != sorted(set(ids)):
            raise ValueError(f"block ids must be unique and increasing, got {ids}")
        prev = self.stem_channels
        for b in self.blocks:
            if b.channels_in != prev:
                raise ValueError(f"block {b.id}: channels_in {b.channels_in} != previous width {prev}")
            prev = b.channels_out
        flagged = {b.id for b in self.blocks if b.td_regularized}
        if flagged != set(self.td.regularized_blocks):
            raise ValueError(
                f"td.regularized_blocks {sorted(self.td.regularized_blocks)} "
                f"disagrees with block flags {sorted(flagged)}"
            )

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].channels_out if self.blocks else self.stem_channels


def build_config(
    widths: Iterable[int] = (16, 32, 32, 64),
    strides: Iterable[int] = (1, 2, 1, 2),
    *,
    use_pem: bool = True,
    tm_kind: str = "depthwise_temporal",
    td_blocks: Iterable[int] | None = None,
    td_position: str = "after_tm",
    pem_position: str = "before_tm",
    td: TdConfig | None = None,
    stem_channels: int = 16,
    **kwargs,
) -> NetworkConfig:
    """Uniform block layout; ``td_blocks`` defaults to every block but the first."""
    widths, strides = list(widths), list(strides)
    if len(widths) != len(strides):
        raise ValueError("widths and strides must have equal length")
    if td_blocks is None:
        td_blocks = range(1, len(widths))
    td_blocks = set(td_blocks) if tm_kind != "none" else set()
    blocks, c_in = [], stem_channels
    for i, (w, s) in enumerate(zip(widths, strides)):
        blocks.append(
            BlockSpec(
                id=i, channels_in=c_in, channels_out=w, spatial_stride=s, use_pem=use_pem,
                tm_kind=tm_kind, td_regularized=i in td_blocks, td_position=td_position,
                pem_position=pem_position,
            )
        )
        c_in = w
    td = replace(td or TdConfig(), regularized_blocks=frozenset(td_blocks))
    return NetworkConfig(stem_channels=stem_channels, blocks=tuple(blocks), td=td, **kwargs)


# -- parameters -------------------------------------------------------------------


def _he(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype), requires_grad=True)


def init_params(cfg: NetworkConfig, dtype=np.float32, seed: int | None = None) -> Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p: Params = {}
    p["stem.weight"] = _he(rng, (cfg.stem_channels, cfg.c_img, 3, 3), cfg.c_img * 9, dtype)
    for b in cfg.blocks:
        pre = f"blocks.{b.id}."
        if b.use_pem:
            pem = PemParams.init(b.channels_in, cfg.pem_reduction, rng, dtype)
            for k, v in pem.tensors().items():
                p[pre + "pem." + k] = v
        if b.tm_kind == "depthwise_temporal":
            w = rng.normal(0.0, 0.1, (b.channels_in, cfg.tm_kernel))
            w[:, cfg.tm_kernel // 2] += 1.0
            p[pre + "tm.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        mid = max(b.channels_out // cfg.bottleneck_div, 1)
        p[pre + "conv1"] = _he(rng, (mid, b.channels_in, 1, 1), b.channels_in, dtype)
        p[pre + "conv2"] = _he(rng, (mid, mid, 3, 3), mid * 9, dtype)
        if cfg.norm_groups:
            for gn in ("gn1", "gn2"):
                p[pre + gn + ".weight"] = Tensor(np.ones(mid, dtype=dtype), requires_grad=True)
                p[pre + gn + ".bias"] = Tensor(np.zeros(mid, dtype=dtype), requires_grad=True)
        p[pre + "conv3"] = Tensor(np.zeros((b.channels_out, mid, 1, 1), dtype=dtype), requires_grad=True)
        if b.needs_projection:
            p[pre + "proj"] = _he(rng, (b.channels_out, b.channels_in, 1, 1), b.channels_in, dtype)
    p["head.weight"] = Tensor(
        rng.normal(0.0, np.sqrt(1.0 / cfg.out_channels), (cfg.K, cfg.out_channels)).astype(dtype),
        requires_grad=True,
    )
    p["head.bias"] = Tensor(np.zeros(cfg.K, dtype=dtype), requires_grad=True)
    return p


def count_params(params: Params) -> int:
    return sum(t.size for t in params.values())


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype, requires_grad=True) for k, v in params.items()}


def pem_params(params: Params, block_id: int) -> PemParams:
    pre = f"blocks.{block_id}.pem."
    return PemParams(params[pre + "f1"], params[pre + "f2"], params[pre + "gate"], params[pre + "expand"])


# -- forward --------------------------------------------------------------------------


def _framewise_conv(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    n, t = x.shape[:2]
    y = conv2d(x.reshape(n * t, *x.shape[2:]), w, stride, pad)
    return y.reshape(n, t, *y.shape[1:])


def _norm(x: Tensor, params: Params, key: str, cfg: NetworkConfig) -> Tensor:
    if not cfg.norm_groups:
        return x
    c = x.shape[1]
    return group_norm(x, params[key + ".weight"], params[key + ".bias"], _groups(c, cfg.norm_groups))


def _groups(channels: int, wanted: int) -> int:
    g = min(wanted, channels)
    while channels % g:
        g -= 1
    return g


def res_conv(h: Tensor, spec: BlockSpec, params: Params, cfg: NetworkConfig) -> Tensor:
    """1x1 -> 3x3 (strided) -> 1x1 on every frame, with GroupNorm + ReLU after the first two."""
    pre = f"blocks.{spec.id}."
    n, t = h.shape[:2]
    r = h.reshape(n * t, *h.shape[2:])
    r = relu(_norm(conv2d(r, params[pre + "conv1"], 1, 0), params, pre + "gn1", cfg))
    r = relu(_norm(conv2d(r, params[pre + "conv2"], spec.spatial_stride, 1), params, pre + "gn2", cfg))
    r = conv2d(r, params[pre + "conv3"], 1, 0)
    return r.reshape(n, t, *r.shape[1:])


def temporal_module(x: Tensor, spec: BlockSpec, params: Params, cfg: NetworkConfig) -> Tensor:
    if spec.tm_kind == "depthwise_temporal":
        return depthwise_temporal_conv(x, params[f"blocks.{spec.id}.tm.weight"])
    if spec.tm_kind == "shift":
        return temporal_shift(x, cfg.shift_fold)
    return x


def block_forward(
    x: Tensor,
    spec: BlockSpec,
    params: Params,
    cfg: NetworkConfig,
    probe: dict | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Returns ``(Y, Z)``; ``Z`` is the TD-loss feature when the block is regularized."""
    if x.ndim != 5 or x.shape[2] != spec.channels_in:
        raise ValueError(f"block {spec.id}: expected [N,T,{spec.channels_in},H,W], got {x.shape}")
    pre = f"blocks.{spec.id}."
    h = x
    if spec.use_pem and spec.pem_position == "before_tm":
        h, a = pem_forward(h, pem_params(params, spec.id), cfg.pem_memory_init)
        if probe is not None:
            probe[spec.id] = a
    before = h
    h = temporal_module(h, spec, params, cfg)
    if spec.use_pem and spec.pem_position == "after_tm":
        h, a = pem_forward(h, pem_params(params, spec.id), cfg.pem_memory_init)
        if probe is not None:
            probe[spec.id] = a
    z = None
    if spec.td_regularized:
        z = h if spec.td_position == "after_tm" else before

    r = res_conv(h, spec, params, cfg)
    shortcut = _framewise_conv(x, params[pre + "proj"], spec.spatial_stride, 0) if spec.needs_projection else x
    if shortcut.shape != r.shape:
        raise ValueError(f"block {spec.id}: residual {r.shape} vs shortcut {shortcut.shape}")
    return shortcut + r, z


def network_forward(
    clips,
    cfg: NetworkConfig,
    params: Params,
    probe: dict | None = None,
) -> tuple[Tensor, dict[int, Tensor]]:
    """``[N,T,C_img,H,W]`` clips -> ``(logits [N,K], Z_by_block)``."""
    x = clips if isinstance(clips, Tensor) else Tensor(np.asarray(clips, dtype=params["stem.weight"].dtype))
    if x.ndim != 5 or x.shape[1] != cfg.T or x.shape[2] != cfg.c_img:
        raise ValueError(f"clips shape {x.shape} does not match T={cfg.T}, C_img={cfg.c_img}")
    h = relu(_framewise_conv(x, params["stem.weight"], cfg.stem_stride, 1))
    z_by_block: dict[int, Tensor] = {}
    for spec in cfg.blocks:
        h, z = block_forward(h, spec, params, cfg, probe)
        if z is not None:
            z_by_block[spec.id] = z
    pooled = global_avg_pool_spatial(h).mean(axis=1)
    return linear(pooled, params["head.weight"], params["head.bias"]), z_by_block
