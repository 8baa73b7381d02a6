import json

import numpy as np
import pytest

from tdrl.backbone import build_config, init_params
from tdrl.serialize import FormatError, read_records, write_records
from tdrl.synthdata import GenSpec, generate_split
from tdrl.tensor import Tensor
from tdrl.train import (
    CheckpointMismatch,
    NumericalFailure,
    OptimState,
    RunRecord,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    sgd_step,
    train,
)


def quad_step(p, opt, a=3.0, c=0.5):
    p.grad = None
    loss = (p - c) * (p - c) * (0.5 * a)
    loss.sum().backward()
    sgd_step({"p": p}, opt)


def test_two_sgd_steps_match_hand_recurrence():
    # f = 1.5 (p - 0.5)^2, lr 0.1, momentum 0.9, wd 0.01, p0 = 2
    # step 1: g = 4.5 + 0.02 = 4.52, v = 4.52, p = 1.548
    # step 2: g = 3.144 + 0.01548 = 3.15948, v = 4.068 + 3.15948 = 7.22748, p = 0.825252
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = OptimState(lr=0.1, momentum=0.9, weight_decay=0.01)
    quad_step(p, opt)
    assert abs(p.data[0] - 1.548) < 1e-12
    quad_step(p, opt)
    assert abs(p.data[0] - 0.825252) < 1e-12
    assert abs(opt.buffers["p"][0] - 7.22748) < 1e-12
    assert p.grad is None


def test_plain_gradient_descent_and_zero_grad():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, 1.0])
    sgd_step({"p": p}, OptimState(lr=0.2, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(p.data, [0.9, -2.2])
    q = Tensor(np.array([3.0]), requires_grad=True)
    q.grad = np.zeros(1)
    sgd_step({"q": q}, OptimState(lr=0.2, momentum=0.9, weight_decay=0.0))
    assert q.data[0] == 3.0


def test_missing_grad_named():
    with pytest.raises(ValueError, match="'w'"):
        sgd_step({"w": Tensor([1.0], requires_grad=True)}, OptimState())


def test_lr_must_be_positive():
    with pytest.raises(ValueError):
        OptimState(lr=0.0)


@pytest.mark.parametrize("epoch,factor", [(0, 1), (29, 1), (30, 1e-1), (39, 1e-1), (40, 1e-2), (44, 1e-2), (45, 1e-3), (49, 1e-3)])
def test_lr_schedule_milestones_of_50(epoch, factor):
    assert lr_schedule(epoch, 50, 0.01) == pytest.approx(0.01 * factor, rel=1e-12)


def test_lr_schedule_range():
    with pytest.raises(ValueError):
        lr_schedule(30, 30, 0.01)
    assert lr_schedule(18, 30, 0.01) == pytest.approx(0.001)


def test_checkpoint_round_trip_and_layout(tmp_path):
    cfg = build_config((8, 8), (1, 2), stem_channels=8, T=3)
    params = init_params(cfg, seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    assert raw[:5] == b"TDRL1"
    name_len = int.from_bytes(raw[5:9], "little")
    assert raw[9 : 9 + name_len].decode() == next(iter(params))
    back = load_checkpoint(path, cfg)
    for k in params:
        assert back[k].data.tobytes() == params[k].data.tobytes()


def test_checkpoint_mismatch_rejected(tmp_path):
    cfg = build_config((8, 8), (1, 2), stem_channels=8, T=3)
    save_checkpoint(tmp_path / "m.ckpt", init_params(cfg))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "m.ckpt", build_config((8, 16), (1, 2), stem_channels=8, T=3))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "m.ckpt", build_config((8, 8), (1, 2), stem_channels=8, T=3, use_pem=False))


def test_record_reader_detects_corruption(tmp_path):
    path = tmp_path / "r.bin"
    write_records(path, {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    np.testing.assert_array_equal(read_records(path)["a"], np.arange(6).reshape(2, 3))
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(FormatError):
        read_records(path)
    path.write_bytes(b"NOPE1" + data[5:])
    with pytest.raises(FormatError):
        read_records(path)


SMALL = GenSpec(H=16, W=16, T=4)


@pytest.fixture(scope="module")
def small_data():
    return generate_split(24, 12, seed=3, spec=SMALL)


def small_cfg(**kw):
    kw.setdefault("td_blocks", [1])
    return build_config((8, 8), (1, 2), stem_channels=8, T=4, pem_reduction=2, **kw)


def test_training_is_deterministic(small_data, tmp_path):
    tr, va = small_data
    a, pa = train(small_cfg(), tr, va, 3, batch_size=8, out_dir=tmp_path / "a")
    b, pb = train(small_cfg(), tr, va, 3, batch_size=8, out_dir=tmp_path / "b")
    assert json.dumps(a.to_dict(timing=False)) == json.dumps(b.to_dict(timing=False))
    for k in pa:
        assert pa[k].data.tobytes() == pb[k].data.tobytes()
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()


def test_metrics_stream_and_loss_identity(small_data, tmp_path):
    tr, va = small_data
    cfg = small_cfg()
    rec, _ = train(cfg, tr, va, 2, batch_size=8, out_dir=tmp_path)
    lines = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 2
    for field in ("epoch", "lr", "train_loss", "train_acc", "val_acc", "ce", "td_sum", "mean_cosine_by_block", "seconds"):
        assert field in lines[0]
    for m in rec.epochs:
        assert 0.0 <= m.train_acc <= 1.0 and 0.0 <= m.val_acc <= 1.0
        assert abs(m.total - (m.ce + cfg.td.lam * m.td_sum)) < 1e-6
        assert set(m.mean_cosine_by_block) == {"1"}
    assert RunRecord.from_dict(json.loads(json.dumps(rec.to_dict()))).to_dict() == rec.to_dict()


def test_nan_aborts_with_epoch_and_component(small_data, monkeypatch):
    import tdrl.train as mod
    from tdrl.tdloss import LossComponentError

    calls = {"n": 0}
    real = mod.total_loss

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 4:
            raise LossComponentError("td_loss", FloatingPointError("nan"))
        return real(*args, **kwargs)

    monkeypatch.setattr(mod, "total_loss", flaky)
    tr, va = small_data
    with pytest.raises(NumericalFailure) as info:
        train(small_cfg(), tr, va, 3, batch_size=8)
    assert info.value.epoch == 1 and info.value.component == "td_loss"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_learning_rate_is_reported(small_data):
    tr, va = small_data
    with pytest.raises(NumericalFailure) as info:
        train(small_cfg(), tr, va, 5, base_lr=1e30, batch_size=8)
    assert info.value.component in {"forward", "backward", "cross_entropy", "td_loss", "total"}
