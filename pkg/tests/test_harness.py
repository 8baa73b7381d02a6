import csv
import json

import numpy as np
import pytest

from tdrl import ablate as ab
from tdrl.backbone import init_params
from tdrl.cli import main
from tdrl.config import ConfigError, config_hash, load_config, network_config
from tdrl.export import diversity_matrix, export_diversity, export_enhancements, ranked_channels
from tdrl.tdloss import TdConfig
from tdrl.train import save_checkpoint

TINY = [
    "data.n_train=8", "data.n_val=4", "data.H=16", "data.W=16", "network.T=4",
    "optim.epochs=1", "optim.batch_size=4", "network.widths=[8,8]", "network.strides=[1,2]",
    "network.stem_channels=8", "network.pem_reduction=2", "td.blocks=[1]",
]


# -- config -----------------------------------------------------------------------------------


def test_defaults_are_valid_and_hash_is_stable():
    cfg = load_config()
    assert cfg["td"]["lambda"] == 2e-4 and cfg["optim"]["base_lr"] == 0.01 and cfg["optim"]["batch_size"] == 16
    assert config_hash(cfg) == config_hash(load_config())
    assert config_hash(cfg) != config_hash(load_config(None, ["td.lambda=3e-4"]))


def test_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"td": {"ratio": 0.25}, "optim": {"epochs": 3}}))
    cfg = load_config(path, ["optim.epochs=5", 'network.tm_kind="shift"'])
    assert cfg["td"]["ratio"] == 0.25 and cfg["optim"]["epochs"] == 5 and cfg["network"]["tm_kind"] == "shift"


@pytest.mark.parametrize("override", ["bogus=1", "td.bogus=1", "td=3", "td.ratio=2", "td.blocks=[9]", "optim.base_lr=0", "network.tm_kind=\"lstm\"", "noequals"])
def test_bad_config_rejected(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_tm_free_config_drops_td_blocks():
    net = network_config(load_config(None, ['network.tm_kind="none"']))
    assert net.td.regularized_blocks == frozenset()


# -- ablation ---------------------------------------------------------------------------------


def test_preset_grids_have_the_expected_rows():
    assert [c.label for c in ab.PRESETS["table4"]] == ["baseline", "+PEM", "+TDLoss", "+PEM+TDLoss"]
    assert [c.overrides["td.ratio"] for c in ab.PRESETS["table5"]] == [0.25, 0.5, 0.75, 1.0]
    assert [c.overrides["td.lambda"] for c in ab.PRESETS["table7"]] == pytest.approx([1e-4, 2e-4, 3e-4, 4e-4])
    assert {c.overrides["td.lambda"] for c in ab.PRESETS["table4"][:2]} == {0.0}


def test_ablate_requires_three_seeds():
    with pytest.raises(ValueError):
        ab.ablate("table4", load_config(None, TINY), seeds=(0, 1))


def test_cell_config_sets_seed_and_overrides():
    base = load_config(None, TINY)
    cfg = ab.cell_config(base, ab.PRESETS["table7"][2], seed=5)
    assert cfg["run"]["seed"] == 5 and cfg["td"]["lambda"] == pytest.approx(3e-4)
    assert base["run"]["seed"] == 0


def test_format_table_lists_medians():
    rec_rows = ab.ablate([ab.Cell("only", {"td.lambda": 0.0})], load_config(None, TINY), seeds=(0, 1, 2))
    text = ab.format_table(rec_rows)
    assert "only" in text and "0,1,2" in text
    assert rec_rows[0].medians["final_val_acc"] == np.median([r.final.val_acc for r in rec_rows[0].records])


# -- export -----------------------------------------------------------------------------------


def _net_and_params(overrides=()):
    cfg = load_config(None, TINY + list(overrides))
    net = network_config(cfg)
    return cfg, net, init_params(net)


def test_zero_pem_exports_half(tmp_path):
    _, net, params = _net_and_params()
    for k in params:
        if ".pem." in k:
            params[k].data[:] = 0
    clip = np.random.default_rng(0).random((4, 1, 16, 16)).astype(np.float32)
    paths = export_enhancements(net, params, clip, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "enhancement_block0.csv")))
    assert list(rows[0]) == ["t", "channel", "value"]
    assert len(rows) == 4 * 8 and all(float(r["value"]) == 0.5 for r in rows)
    assert len(paths) == 4


def test_identical_frames_give_unit_diversity(tmp_path):
    _, net, params = _net_and_params()
    frame = np.random.default_rng(1).random((1, 1, 16, 16)).astype(np.float32)
    export_diversity(net, params, np.repeat(frame, 4, axis=0), tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "diversity_block1.csv")))
    assert list(rows[0]) == ["i", "j", "mean_cosine"] and len(rows) == 16
    np.testing.assert_allclose([float(r["mean_cosine"]) for r in rows], 1.0, atol=1e-6)


def test_diversity_skips_dead_maps():
    rng = np.random.default_rng(2)
    z = np.repeat(rng.random((1, 1, 4, 3, 3)), 3, axis=1)
    z[:, :, 1] = 0.0
    np.testing.assert_allclose(diversity_matrix(z, TdConfig(ratio=0.5)), np.ones((3, 3)), atol=1e-12)
    z[:, :, 0] = 0.0
    assert np.isnan(diversity_matrix(z, TdConfig(ratio=0.5))).all()


def test_ranked_channels_top_and_bottom():
    a = np.array([[0.1, 0.9, 0.5], [0.7, 0.2, 0.3]])
    rows = ranked_channels(a, k=2)
    assert [(r[0], r[1], r[3]) for r in rows] == [
        (0, "top", 1), (0, "top", 2), (0, "bottom", 0), (0, "bottom", 2),
        (1, "top", 0), (1, "top", 2), (1, "bottom", 1), (1, "bottom", 2),
    ]


# -- CLI ----------------------------------------------------------------------------------------


def _sets(items):
    return [arg for item in items for arg in ("--set", item)]


def test_cli_train_eval_export_round_trip(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "run"), *_sets(TINY + ["optim.epochs=2"])]) == 0
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [line["epoch"] for line in lines[:2]] == [0, 1] and "best_val_acc" in lines[2]
    ckpt = str(tmp_path / "run" / "best.ckpt")
    assert main(["eval", "--checkpoint", ckpt, *_sets(TINY)]) == 0
    assert 0 <= json.loads(capsys.readouterr().out)["acc"] <= 1
    assert main(["export", "--checkpoint", ckpt, "--out", str(tmp_path / "exp"), *_sets(TINY)]) == 0
    assert (tmp_path / "exp" / "enhancement_block1_ranked.csv").exists()
    # a checkpoint from a different architecture is a config error
    assert main(["eval", "--checkpoint", ckpt, *_sets(TINY + ["network.use_pem=false"])]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(tmp_path, capsys, monkeypatch):
    assert main(["train", "--set", "nope=1"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", *_sets(TINY + ["optim.base_lr=1e30", "optim.epochs=4"])]) == 3

    import tdrl.cli as cli
    from tdrl.gradcheck import CheckResult

    monkeypatch.setattr(cli, "run_checks", lambda checks: [CheckResult("fake", 1.0, 1e-3)])
    assert main(["gradcheck"]) == 4


def test_cli_gen_data(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), *_sets(TINY)]) == 0
    out = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert out[0]["clips"] == 8 and out[1]["class_counts"] == [1, 1, 1, 1]
    assert (tmp_path / "train.clips").read_bytes()[:6] == b"CLIPS1"


def test_save_checkpoint_via_params(tmp_path):
    _, net, params = _net_and_params()
    save_checkpoint(tmp_path / "x.ckpt", params)
    assert (tmp_path / "x.ckpt").stat().st_size > 0
