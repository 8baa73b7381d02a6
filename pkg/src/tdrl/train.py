"""SGD training loop, evaluation and run records."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .backbone import NetworkConfig, Params, init_params, network_forward
from .serialize import read_records, write_records
from .synthdata import ClipBatch
from .tdloss import LossComponentError, total_loss
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

MILESTONES = (0.6, 0.8, 0.9)


class NumericalFailure(RuntimeError):
    def __init__(self, epoch: int, component: str, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch} in {component}" + (f": {detail}" if detail else ""))
        self.epoch = epoch
        self.component = component


class CheckpointMismatch(ValueError):
    pass


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def sgd_step(params: Mapping[str, Tensor], opt: OptimState) -> None:
    """``v = mu*v + g + wd*p``; ``p -= lr*v``; gradients are cleared."""
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad + opt.weight_decay * p.data if opt.weight_decay else p.grad
        buf = opt.buffers.get(name)
        buf = g.astype(p.data.dtype, copy=True) if buf is None else opt.momentum * buf + g
        opt.buffers[name] = buf.astype(p.data.dtype, copy=False)
        p.data = (p.data - opt.lr * buf).astype(p.data.dtype, copy=False)
        p.grad = None


def lr_schedule(epoch: int, total: int, base_lr: float) -> float:
    """Divide by 10 at 60%, 80% and 90% of training (30/40/45 of 50 epochs)."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    passed = sum(epoch >= round(m * total) for m in MILESTONES)
    return base_lr * 10.0 ** (-passed)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    ce: float
    td_sum: float
    total: float
    mean_cosine_by_block: dict[str, float]
    seconds: float


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    epochs: list[EpochMetrics] = field(default_factory=list)
    best_val_acc: float = 0.0
    best_epoch: int = -1

    def append(self, m: EpochMetrics) -> None:
        self.epochs.append(m)
        if m.val_acc > self.best_val_acc or self.best_epoch < 0:
            self.best_val_acc, self.best_epoch = m.val_acc, m.epoch

    @property
    def final(self) -> EpochMetrics:
        return self.epochs[-1]

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            for e in d["epochs"]:
                e.pop("seconds")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        rec = cls(config_hash=d["config_hash"], seed=d["seed"])
        rec.epochs = [EpochMetrics(**e) for e in d["epochs"]]
        rec.best_val_acc, rec.best_epoch = d["best_val_acc"], d["best_epoch"]
        return rec


def evaluate(cfg: NetworkConfig, params: Params, data: ClipBatch, batch_size: int = 50) -> dict:
    """Loss, accuracy and mean pairwise cosine on regularized channels, without gradients."""
    n = len(data)
    correct, loss_sum = 0, 0.0
    cos_sum: dict[int, float] = {}
    with no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            logits, z = network_forward(data.clips[sl], cfg, params)
            lb = total_loss(logits, data.labels[sl], z, cfg.td)
            m = len(data.labels[sl])
            loss_sum += float(lb.total.data) * m
            correct += int((logits.data.argmax(axis=1) == data.labels[sl]).sum())
            for b, term in lb.td_terms.items():
                c_mu = cfg.td.n_channels(z[b].shape[2])
                cos_sum[b] = cos_sum.get(b, 0.0) + float(term.data) / c_mu * m
    return {
        "loss": loss_sum / n,
        "acc": correct / n,
        "mean_cosine_by_block": {str(b): v / n for b, v in sorted(cos_sum.items())},
    }


def save_checkpoint(path: str | Path, params: Params) -> None:
    write_records(path, {k: v.data for k, v in params.items()})


def load_checkpoint(path: str | Path, cfg: NetworkConfig) -> Params:
    """Load parameters and check names/shapes against a freshly initialised network."""
    arrays = read_records(path)
    ref = init_params(cfg)
    if set(arrays) != set(ref):
        extra, missing = sorted(set(arrays) - set(ref)), sorted(set(ref) - set(arrays))
        raise CheckpointMismatch(f"checkpoint does not match config: unexpected {extra}, missing {missing}")
    for k, v in arrays.items():
        if v.shape != ref[k].shape:
            raise CheckpointMismatch(f"checkpoint does not match config: {k} has shape {v.shape}, expected {ref[k].shape}")
    return {k: Tensor(arrays[k], requires_grad=True) for k in ref}


def train(
    cfg: NetworkConfig,
    train_data: ClipBatch,
    val_data: ClipBatch,
    epochs: int,
    base_lr: float = 0.01,
    *,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    batch_size: int = 16,
    config_hash: str = "",
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
    stop_at_val_acc: float | None = None,
) -> tuple[RunRecord, Params]:
    """Minimise cross-entropy + lambda * TD loss; returns the record and final parameters.

    Writes ``metrics.jsonl`` and ``best.ckpt`` into ``out_dir`` when given.
    ``stop_at_val_acc`` ends the run early once validation accuracy reaches it.
    """
    params = init_params(cfg)
    opt = OptimState(lr=base_lr, momentum=momentum, weight_decay=weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])
    record = RunRecord(config_hash=config_hash, seed=cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    n = len(train_data)

    for epoch in range(epochs):
        t0 = time.perf_counter()
        opt.lr = lr_schedule(epoch, epochs, base_lr)
        order = rng.permutation(n)
        loss_sum = ce_sum = td_sum = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            m = len(idx)
            try:
                logits, z = network_forward(train_data.clips[idx], cfg, params)
            except NonFiniteError as exc:
                raise NumericalFailure(epoch, "forward", str(exc)) from exc
            try:
                lb = total_loss(logits, train_data.labels[idx], z, cfg.td)
            except LossComponentError as exc:
                raise NumericalFailure(epoch, exc.component, str(exc)) from exc
            if not math.isfinite(float(lb.total.data)):
                raise NumericalFailure(epoch, "total")
            try:
                lb.total.backward()
            except NonFiniteError as exc:
                raise NumericalFailure(epoch, "backward", str(exc)) from exc
            sgd_step(params, opt)
            loss_sum += float(lb.total.data) * m
            ce_sum += float(lb.cross_entropy.data) * m
            td_sum += lb.td_sum * m
            correct += int((logits.data.argmax(axis=1) == train_data.labels[idx]).sum())

        val = evaluate(cfg, params, val_data)
        metrics = EpochMetrics(
            epoch=epoch,
            lr=opt.lr,
            train_loss=loss_sum / n,
            train_acc=correct / n,
            val_loss=val["loss"],
            val_acc=val["acc"],
            ce=ce_sum / n,
            td_sum=td_sum / n,
            total=loss_sum / n,
            mean_cosine_by_block=val["mean_cosine_by_block"],
            seconds=time.perf_counter() - t0,
        )
        improved = metrics.val_acc > record.best_val_acc or record.best_epoch < 0
        record.append(metrics)
        log.info(
            "epoch %d lr %.0e loss %.4f train_acc %.3f val_acc %.3f (%.1fs)",
            epoch, opt.lr, metrics.train_loss, metrics.train_acc, metrics.val_acc, metrics.seconds,
        )
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(asdict(metrics)) + "\n")
            if improved:
                save_checkpoint(out / "best.ckpt", params)
        if on_epoch is not None:
            on_epoch(metrics)
        if stop_at_val_acc is not None and metrics.val_acc >= stop_at_val_acc:
            break
    return record, params
