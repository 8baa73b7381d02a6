"""Moving-square clips whose label is carried only by frame order.

A bright square travels across a static smooth background on a torus (it wraps
at the borders).  The start position is uniform, so the square's location in
any single frame is uniform whatever the class.  Reversing a clip in time
yields exactly the clip of the opposite direction for the same seed.

Classes for ``K=4`` are ``left, right, up, down``.  ``K=8`` adds a phase:
``<dir>-early`` moves during the first half then stops, ``<dir>-late`` waits
and then moves.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .serialize import CLIPS_MAGIC, read_records, write_records

DIRECTIONS = ("left", "right", "up", "down")
OPPOSITE = {"left": "right", "right": "left", "up": "down", "down": "up"}


@dataclass(frozen=True)
class GenSpec:
    K: int = 4
    T: int = 8
    H: int = 32
    W: int = 32
    square_sizes: tuple[int, ...] = (4, 5, 6)
    speeds: tuple[int, ...] = (2, 3)
    background_grid: int = 5
    background_amp: float = 0.5
    square_amp: float = 0.5

    def __post_init__(self):
        if self.K not in (4, 8):
            raise ValueError(f"K must be 4 or 8, got {self.K}")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.background_amp + self.square_amp > 1.0:
            raise ValueError("background_amp + square_amp must not exceed 1")

    @property
    def class_names(self) -> tuple[str, ...]:
        if self.K == 4:
            return DIRECTIONS
        return tuple(f"{d}-{p}" for d in DIRECTIONS for p in ("early", "late"))


@dataclass
class ClipBatch:
    clips: np.ndarray  # [N, T, 1, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    seeds: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClipBatch":
        return ClipBatch(self.clips[idx], self.labels[idx], self.seeds[idx])


def _upsample(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    gy = np.linspace(0, coarse.shape[0] - 1, h)
    gx = np.linspace(0, coarse.shape[1] - 1, w)
    rows = np.stack([np.interp(gx, np.arange(coarse.shape[1]), r) for r in coarse])
    return np.stack([np.interp(gy, np.arange(coarse.shape[0]), rows[:, j]) for j in range(w)], axis=1)


def _progress(t: int, T: int, phase: str | None) -> int:
    half = (T - 1) // 2
    if phase is None:
        return t
    if phase == "early":
        return min(t, half)
    return max(0, t - (T - 1 - half))


def _decode(cls: int, spec: GenSpec) -> tuple[str, str | None]:
    if not 0 <= cls < spec.K:
        raise ValueError(f"class {cls} out of range for K={spec.K}")
    if spec.K == 4:
        return DIRECTIONS[cls], None
    return DIRECTIONS[cls // 2], ("early", "late")[cls % 2]


def _encode(direction: str, phase: str | None, spec: GenSpec) -> int:
    d = DIRECTIONS.index(direction)
    return d if spec.K == 4 else 2 * d + ("early", "late").index(phase)


def reversed_class(cls: int, spec: GenSpec) -> int:
    """Class whose clip equals the time reversal of ``cls``'s clip (same seed)."""
    direction, phase = _decode(cls, spec)
    flipped = None if phase is None else {"early": "late", "late": "early"}[phase]
    return _encode(OPPOSITE[direction], flipped, spec)


def trajectory(seed: int, cls: int, spec: GenSpec) -> np.ndarray:
    """Top-left ``(y, x)`` of the square per frame, before wrapping."""
    direction, phase = _decode(cls, spec)
    rng = np.random.default_rng(seed)
    rng.random((spec.background_grid, spec.background_grid))  # background draw, kept in sequence
    rng.integers(len(spec.square_sizes))
    v = spec.speeds[rng.integers(len(spec.speeds))]
    a = int(rng.integers(spec.W if direction in ("left", "right") else spec.H))
    b = int(rng.integers(spec.H if direction in ("left", "right") else spec.W))
    total = _progress(spec.T - 1, spec.T, phase)
    pos = []
    for t in range(spec.T):
        q = _progress(t, spec.T, phase)
        along = a + v * (q if direction in ("right", "down") else total - q)
        pos.append((b, along) if direction in ("left", "right") else (along, b))
    return np.array(pos)


def generate_clip(seed: int, cls: int, spec: GenSpec = GenSpec()) -> np.ndarray:
    """Deterministic ``[T, 1, H, W]`` float32 clip for ``(seed, cls)``."""
    _decode(cls, spec)
    rng = np.random.default_rng(seed)
    coarse = rng.random((spec.background_grid, spec.background_grid))
    size = spec.square_sizes[rng.integers(len(spec.square_sizes))]
    bg = spec.background_amp * _upsample(coarse, spec.H, spec.W)
    clip = np.repeat(bg[None, None], spec.T, axis=0)
    offs = np.arange(size)
    for t, (y, x) in enumerate(trajectory(seed, cls, spec)):
        rows = (y + offs) % spec.H
        cols = (x + offs) % spec.W
        clip[t, 0][np.ix_(rows, cols)] += spec.square_amp
    return clip.astype(np.float32)


def generate_batch(seeds, labels, spec: GenSpec = GenSpec()) -> ClipBatch:
    seeds = np.asarray(seeds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    clips = np.stack([generate_clip(int(s), int(c), spec) for s, c in zip(seeds, labels)])
    return ClipBatch(clips, labels, seeds)


def split_seeds(n_train: int, n_val: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    all_seeds = rng.choice(2**31 - 1, size=n_train + n_val, replace=False).astype(np.int64)
    return all_seeds[:n_train], all_seeds[n_train:]


def generate_split(n_train: int, n_val: int, seed: int, spec: GenSpec = GenSpec()) -> tuple[ClipBatch, ClipBatch]:
    """Disjoint train/val sets with balanced, shuffled labels."""
    rng = np.random.default_rng([seed, 1])
    tr_seeds, va_seeds = split_seeds(n_train, n_val, seed)
    tr_labels = rng.permutation(np.arange(n_train) % spec.K)
    va_labels = rng.permutation(np.arange(n_val) % spec.K)
    return generate_batch(tr_seeds, tr_labels, spec), generate_batch(va_seeds, va_labels, spec)


def centroid_oracle(clip: np.ndarray, spec: GenSpec = GenSpec()) -> int:
    """Classify a clip by tracking the square; independent of any learned model."""
    frames = np.asarray(clip, dtype=np.float64)[:, 0]
    bg = frames.min(axis=0)
    masks = (frames - bg) > spec.square_amp / 2
    T, H, W = frames.shape

    def circ_centre(mask, axis, period):
        prof = mask.sum(axis=axis)
        ang = 2 * np.pi * np.arange(period) / period
        return np.angle((prof * np.exp(1j * ang)).sum()) * period / (2 * np.pi)

    def wrap(d, period):
        return (d + period / 2) % period - period / 2

    cy = np.array([circ_centre(m, 1, H) for m in masks])
    cx = np.array([circ_centre(m, 0, W) for m in masks])
    dy, dx = wrap(np.diff(cy), H), wrap(np.diff(cx), W)
    if abs(dx.sum()) >= abs(dy.sum()):
        direction, steps = ("right" if dx.sum() > 0 else "left"), np.abs(dx)
    else:
        direction, steps = ("down" if dy.sum() > 0 else "up"), np.abs(dy)
    phase = None
    if spec.K == 8:
        half = len(steps) // 2
        phase = "early" if steps[:half].sum() > steps[half:].sum() else "late"
    return _encode(direction, phase, spec)


def save_clips(path: str | Path, batch: ClipBatch) -> None:
    # records hold float32 only; split seeds into 16-bit halves so they survive exactly
    seeds = batch.seeds.astype(np.int64)
    write_records(
        path,
        {
            "clips": batch.clips,
            "labels": batch.labels.astype(np.float32),
            "seeds_hi": (seeds >> 16).astype(np.float32),
            "seeds_lo": (seeds & 0xFFFF).astype(np.float32),
        },
        magic=CLIPS_MAGIC,
    )


def load_clips(path: str | Path) -> ClipBatch:
    rec = read_records(path, magic=CLIPS_MAGIC)
    seeds = (rec["seeds_hi"].astype(np.int64) << 16) | rec["seeds_lo"].astype(np.int64)
    return ClipBatch(rec["clips"], rec["labels"].astype(np.int64), seeds)
