"""CSV exports of per-frame enhancement vectors and frame-similarity matrices."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .backbone import NetworkConfig, Params, network_forward
from .tdloss import TdConfig
from .tensor import no_grad

TOP_K = 10


def _as_clip(clip: np.ndarray, cfg: NetworkConfig) -> np.ndarray:
    clip = np.asarray(clip, dtype=np.float32)
    if clip.ndim == 4:
        clip = clip[None]
    if clip.ndim != 5 or clip.shape[1:3] != (cfg.T, cfg.c_img):
        raise ValueError(f"clip shape {clip.shape} does not match T={cfg.T}, C_img={cfg.c_img}")
    return clip


def enhancement_matrices(cfg: NetworkConfig, params: Params, clip) -> dict[int, np.ndarray]:
    """``{block_id: A}`` with ``A`` of shape ``[T, C]`` for the first clip in the batch."""
    probe: dict = {}
    with no_grad():
        network_forward(_as_clip(clip, cfg), cfg, params, probe=probe)
    return {b: a.data[0] for b, a in sorted(probe.items())}


def diversity_matrix(z: np.ndarray, cfg: TdConfig) -> np.ndarray:
    """``T x T`` frame cosine averaged over regularized channels whose maps are nonzero in every frame.

    All-zero maps (dead ReLU channels) have no direction, so they are left out
    of the average rather than counted as orthogonal.  Returns NaNs when no
    channel qualifies.
    """
    z = np.asarray(z, dtype=np.float64)
    n, t, c, h, w = z.shape
    c_mu = cfg.n_channels(c)
    v = z[:, :, :c_mu].reshape(n, t, c_mu, h * w)
    norms = np.linalg.norm(v, axis=-1)
    live = (norms > cfg.eps).all(axis=1)  # [N, C_mu]
    if not live.any():
        return np.full((t, t), np.nan)
    u = v / np.maximum(norms, cfg.eps)[..., None]
    gram = np.clip(np.einsum("ntcd,nscd->ncts", u, u), -1.0, 1.0)
    return gram[live].mean(axis=0)


def similarity_matrices(cfg: NetworkConfig, params: Params, clip) -> dict[int, np.ndarray]:
    with no_grad():
        _, z = network_forward(_as_clip(clip, cfg), cfg, params)
    return {b: diversity_matrix(t.data, cfg.td) for b, t in sorted(z.items())}


def ranked_channels(a: np.ndarray, k: int = TOP_K) -> list[tuple[int, str, int, int, float]]:
    """Rows ``(t, kind, rank, channel, value)`` for the k most and least enhanced channels per frame."""
    rows = []
    for t, vec in enumerate(a):
        order = np.argsort(-vec, kind="stable")
        k_eff = min(k, len(vec))
        for rank, c in enumerate(order[:k_eff]):
            rows.append((t, "top", rank, int(c), float(vec[c])))
        for rank, c in enumerate(order[::-1][:k_eff]):
            rows.append((t, "bottom", rank, int(c), float(vec[c])))
    return rows


def _write(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def export_enhancements(cfg: NetworkConfig, params: Params, clip, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for b, a in enhancement_matrices(cfg, params, clip).items():
        rows = [(t, c, repr(float(a[t, c]))) for t in range(a.shape[0]) for c in range(a.shape[1])]
        written.append(_write(out / f"enhancement_block{b}.csv", ["t", "channel", "value"], rows))
        written.append(_write(out / f"enhancement_block{b}_ranked.csv", ["t", "kind", "rank", "channel", "value"], ranked_channels(a)))
    return written


def export_diversity(cfg: NetworkConfig, params: Params, clip, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for b, s in similarity_matrices(cfg, params, clip).items():
        rows = [(i, j, repr(float(s[i, j]))) for i in range(s.shape[0]) for j in range(s.shape[1])]
        written.append(_write(out / f"diversity_block{b}.csv", ["i", "j", "mean_cosine"], rows))
    return written
