"""Run one training job from a JSON-style configuration dictionary."""

from __future__ import annotations

from pathlib import Path
from typing import Callable

from .config import config_hash, gen_spec, network_config
from .synthdata import ClipBatch, generate_split, load_clips, save_clips
from .train import EpochMetrics, RunRecord, train


def load_data(cfg: dict) -> tuple[ClipBatch, ClipBatch]:
    """Generate the train/val split, going through the on-disk cache when configured."""
    d = cfg["data"]
    spec = gen_spec(cfg)
    cache = d.get("cache_dir")
    if cache:
        tag = f"K{spec.K}_T{spec.T}_{spec.H}x{spec.W}_s{d['seed']}"
        paths = [Path(cache) / f"{tag}_train{d['n_train']}.clips", Path(cache) / f"{tag}_val{d['n_val']}.clips"]
        if all(p.exists() for p in paths):
            return load_clips(paths[0]), load_clips(paths[1])
    tr, va = generate_split(int(d["n_train"]), int(d["n_val"]), int(d["seed"]), spec)
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
        save_clips(paths[0], tr)
        save_clips(paths[1], va)
    return tr, va


def run(
    cfg: dict,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
):
    """Train the configured network; returns ``(RunRecord, params)``."""
    net = network_config(cfg)
    tr, va = load_data(cfg)
    o = cfg["optim"]
    if out_dir is None:
        out_dir = cfg["run"].get("out_dir")
    record, params = train(
        net,
        tr,
        va,
        int(o["epochs"]),
        float(o["base_lr"]),
        momentum=float(o["momentum"]),
        weight_decay=float(o["weight_decay"]),
        batch_size=int(o["batch_size"]),
        config_hash=config_hash(cfg),
        out_dir=out_dir if cfg["run"].get("save_checkpoint", True) else None,
        on_epoch=on_epoch,
    )
    return record, params


__all__ = ["RunRecord", "load_data", "run"]
