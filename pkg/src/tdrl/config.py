"""JSON run configuration with ``--set key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

from .backbone import NetworkConfig, build_config
from .synthdata import GenSpec
from .tdloss import TdConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "network": {
        "T": 8,
        "K": 4,
        "c_img": 1,
        "stem_channels": 16,
        "stem_stride": 2,
        "widths": [16, 32, 32, 64],
        "strides": [1, 2, 1, 2],
        "use_pem": True,
        "pem_position": "before_tm",
        "pem_reduction": 4,
        "pem_memory_init": "last_diff",
        "tm_kind": "depthwise_temporal",
        "tm_kernel": 3,
        "shift_fold": 0.125,
        "bottleneck_div": 4,
        "norm_groups": 4,
    },
    "td": {
        "ratio": 0.5,
        "eps": 1e-8,
        "lambda": 2e-4,
        "blocks": [1, 2, 3],
        "position": "after_tm",
    },
    "optim": {
        "base_lr": 0.01,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "batch_size": 16,
        "epochs": 30,
    },
    "data": {
        "n_train": 2000,
        "n_val": 500,
        "seed": 0,
        "H": 32,
        "W": 32,
        "cache_dir": None,
    },
    "run": {
        "seed": 0,
        "out_dir": None,
        "save_checkpoint": True,
        "threads": 1,
    },
}


def default_config() -> dict[str, dict[str, Any]]:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    for item in overrides:
        keys, value = parse_override(item)
        nested: Any = value
        for k in reversed(keys):
            nested = {k: nested}
        _merge(cfg, nested)
    return cfg


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be an object")
        _merge(cfg, user)
    apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def network_config(cfg: dict) -> NetworkConfig:
    net, td = cfg["network"], cfg["td"]
    try:
        return build_config(
            net["widths"],
            net["strides"],
            use_pem=bool(net["use_pem"]),
            tm_kind=net["tm_kind"],
            td_blocks=td["blocks"],
            td_position=td["position"],
            pem_position=net["pem_position"],
            td=TdConfig(ratio=float(td["ratio"]), eps=float(td["eps"]), lam=float(td["lambda"])),
            stem_channels=int(net["stem_channels"]),
            T=int(net["T"]),
            K=int(net["K"]),
            c_img=int(net["c_img"]),
            stem_stride=int(net["stem_stride"]),
            seed=int(cfg["run"]["seed"]),
            pem_reduction=int(net["pem_reduction"]),
            pem_memory_init=net["pem_memory_init"],
            tm_kernel=int(net["tm_kernel"]),
            shift_fold=float(net["shift_fold"]),
            bottleneck_div=int(net["bottleneck_div"]),
            norm_groups=int(net["norm_groups"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def gen_spec(cfg: dict) -> GenSpec:
    try:
        return GenSpec(K=int(cfg["network"]["K"]), T=int(cfg["network"]["T"]), H=int(cfg["data"]["H"]), W=int(cfg["data"]["W"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def validate(cfg: dict) -> None:
    netcfg = network_config(cfg)
    gen_spec(cfg)
    if netcfg.c_img != 1:
        raise ConfigError("the synthetic generator produces single-channel clips; network.c_img must be 1")
    unknown = set(cfg["td"]["blocks"]) - {b.id for b in netcfg.blocks}
    if unknown:
        raise ConfigError(f"td.blocks references unknown block ids {sorted(unknown)}")
    o = cfg["optim"]
    if not o["base_lr"] > 0:
        raise ConfigError("optim.base_lr must be positive")
    if int(o["batch_size"]) < 1 or int(o["epochs"]) < 1:
        raise ConfigError("optim.batch_size and optim.epochs must be >= 1")
    if int(cfg["data"]["n_train"]) < 1 or int(cfg["data"]["n_val"]) < 1:
        raise ConfigError("data.n_train and data.n_val must be >= 1")
