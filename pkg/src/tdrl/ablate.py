"""Ablation grids: one configuration per cell, several seeds per cell, medians per row."""

from __future__ import annotations

import copy
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .config import apply_overrides, config_hash, validate
from .experiment import run
from .train import RunRecord

TD_OFF = {"td.lambda": 0.0}


def _cells(rows: Sequence[tuple[str, dict]]) -> list["Cell"]:
    return [Cell(label, dict(ov)) for label, ov in rows]


@dataclass(frozen=True)
class Cell:
    label: str
    overrides: dict


PRESETS: dict[str, list[Cell]] = {
    "table4": _cells([
        ("baseline", {"network.use_pem": False, **TD_OFF}),
        ("+PEM", {"network.use_pem": True, **TD_OFF}),
        ("+TDLoss", {"network.use_pem": False, "td.lambda": 2e-4}),
        ("+PEM+TDLoss", {"network.use_pem": True, "td.lambda": 2e-4}),
    ]),
    "table5": _cells([
        (f"{int(r * 100)}% TDLoss", {"network.use_pem": False, "td.lambda": 2e-4, "td.ratio": r})
        for r in (0.25, 0.5, 0.75, 1.0)
    ]),
    "table6": _cells([
        ("TDLoss after TM", {"network.use_pem": False, "td.lambda": 2e-4, "td.position": "after_tm"}),
        ("TDLoss before TM", {"network.use_pem": False, "td.lambda": 2e-4, "td.position": "before_tm"}),
        ("PEM before TM", {"network.use_pem": True, "network.pem_position": "before_tm", **TD_OFF}),
        ("PEM after TM", {"network.use_pem": True, "network.pem_position": "after_tm", **TD_OFF}),
    ]),
    "table7": _cells([
        (f"lambda={k}e-4", {"network.use_pem": False, "td.lambda": k * 1e-4}) for k in (1, 2, 3, 4)
    ]),
}

METRICS = ("final_val_acc", "best_val_acc", "final_train_acc", "final_mean_cosine")


def cell_config(base: dict, cell: Cell, seed: int) -> dict:
    cfg = copy.deepcopy(base)
    apply_overrides(cfg, [f"{k}={json.dumps(v)}" for k, v in cell.overrides.items()])
    cfg["run"]["seed"] = seed
    cfg["run"]["out_dir"] = None
    cfg["run"]["save_checkpoint"] = False
    validate(cfg)
    return cfg


def summarize(record: RunRecord) -> dict[str, float]:
    last = record.final
    cos = list(last.mean_cosine_by_block.values())
    return {
        "final_val_acc": last.val_acc,
        "best_val_acc": record.best_val_acc,
        "final_train_acc": last.train_acc,
        "final_mean_cosine": statistics.fmean(cos) if cos else float("nan"),
    }


@dataclass
class Row:
    label: str
    overrides: dict
    seeds: list[int]
    config_hashes: list[str]
    records: list[RunRecord] = field(repr=False)
    medians: dict[str, float]

    def to_dict(self, timing: bool = True) -> dict:
        return {
            "label": self.label,
            "overrides": self.overrides,
            "seeds": self.seeds,
            "config_hashes": self.config_hashes,
            "medians": self.medians,
            "per_seed": [summarize(r) for r in self.records],
            "records": [r.to_dict(timing) for r in self.records],
        }


def _run_one(cfg: dict) -> RunRecord:
    return run(cfg)[0]


def ablate(
    grid: str | Sequence[Cell],
    base: dict,
    seeds: Sequence[int] = (0, 1, 2),
    workers: int = 1,
) -> list[Row]:
    """Train every cell of ``grid`` once per seed; cells are independent jobs."""
    cells = PRESETS[grid] if isinstance(grid, str) else list(grid)
    if len(seeds) < 3:
        raise ValueError(f"at least 3 seeds per cell are required, got {list(seeds)}")
    cfgs = [[cell_config(base, c, s) for s in seeds] for c in cells]
    flat = [cfg for row in cfgs for cfg in row]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_run_one, flat))
    else:
        records = [_run_one(cfg) for cfg in flat]
    rows, i = [], 0
    for cell, row_cfgs in zip(cells, cfgs):
        recs = records[i : i + len(row_cfgs)]
        i += len(row_cfgs)
        per = [summarize(r) for r in recs]
        medians = {m: statistics.median(p[m] for p in per) for m in METRICS}
        rows.append(Row(cell.label, cell.overrides, list(seeds), [config_hash(c) for c in row_cfgs], recs, medians))
    return rows


def format_table(rows: Sequence[Row]) -> str:
    head = "| setting | " + " | ".join(METRICS) + " | seeds |"
    lines = [head, "|" + "---|" * (len(METRICS) + 2)]
    for r in rows:
        vals = " | ".join(f"{r.medians[m]:.4f}" for m in METRICS)
        lines.append(f"| {r.label} | {vals} | {','.join(map(str, r.seeds))} |")
    return "\n".join(lines)


def write_results(path: str | Path, rows: Sequence[Row], timing: bool = True) -> None:
    Path(path).write_text(json.dumps([r.to_dict(timing) for r in rows], indent=1, sort_keys=True))
