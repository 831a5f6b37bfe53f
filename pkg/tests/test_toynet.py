import json

import numpy as np
import pytest

from kspaceqc import diffkit as dk
from kspaceqc import losses
from kspaceqc.toynet import (CheckpointError, ModelError, NetConfig, forward, freeze, init,
                             load_checkpoint, param_count, param_shapes, predict, save_checkpoint)


def test_param_count_closed_form():
    # conv: out*in*27 + out per layer; heads: 1x1x1 convs with bias
    c, k = 3, 2
    body = (8 * 1 * 27 + 8) + (16 * 8 * 27 + 16) + (8 * 16 * 27 + 8)
    heads = (c * 8 + c) + (k * 8 + k)
    assert body + heads == 7205
    assert param_count(NetConfig(num_classes=c, uncertainty_channels=k)) == 7205


def test_init_determinism():
    a = init(NetConfig(seed=3))
    b = init(NetConfig(seed=3))
    c = init(NetConfig(seed=4))
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)
    assert a.checksum() == b.checksum() != c.checksum()


@pytest.mark.parametrize("bad", [
    dict(widths=()), dict(widths=(8, 0)), dict(num_classes=1), dict(uncertainty_channels=0),
    dict(kernel_size=2), dict(in_channels=2), dict(uncertainty_channels=2, channel_names=("a", "a")),
])
def test_config_rejections(bad):
    with pytest.raises(ModelError):
        NetConfig(**bad)


def test_forward_shapes_and_determinism(rng):
    m = init(NetConfig(uncertainty_channels=2))
    x = rng.uniform(size=(16, 16, 16))
    lg, s = predict(m, x)
    assert lg.shape == (1, 3, 16, 16, 16) and s.shape == (1, 2, 16, 16, 16)
    lg2, s2 = predict(m, x)
    assert np.array_equal(lg, lg2) and np.array_equal(s, s2)
    assert np.isfinite(lg).all()
    b = predict(m, rng.uniform(size=(2, 1, 5, 7, 9)))[0]
    assert b.shape == (2, 3, 5, 7, 9)


def test_forward_rejects_bad_shapes():
    m = init(NetConfig())
    with pytest.raises(ModelError):
        predict(m, np.zeros((2, 2, 2)))
    with pytest.raises(ModelError):
        predict(m, np.zeros((1, 2, 8, 8, 8)))


def _teacher_loss(m, x, labels, target):
    def f(tape, ts):
        mm = type(m)(m.config, ts, False, m.provenance)
        logits, s = forward(mm, x)
        ce = losses.cross_entropy(logits, labels)
        return losses.aug_loss(ce, dk.take_channel(s, 0), dk.take_channel(s, 1), target, 0.05)[0]
    return f


def test_end_to_end_gradient_small_net(rng):
    m = init(NetConfig(uncertainty_channels=2, widths=(2, 3), seed=1))
    x = rng.uniform(size=(1, 1, 6, 6, 6))
    labels = rng.integers(0, 3, size=(1, 6, 6, 6))
    target = rng.normal(-1, 0.3, size=(1, 1, 6, 6, 6))
    report = dk.grad_check(_teacher_loss(m, x, labels, target), m.params)
    assert report.passed, report.errors


@pytest.mark.slow
def test_end_to_end_gradient_default_net(rng):
    m = init(NetConfig(uncertainty_channels=2, seed=2))
    x = rng.uniform(size=(1, 1, 6, 6, 6))
    labels = rng.integers(0, 3, size=(1, 6, 6, 6))
    target = rng.normal(-1, 0.3, size=(1, 1, 6, 6, 6))
    report = dk.grad_check(_teacher_loss(m, x, labels, target), m.params)
    assert report.passed, report.errors


def test_freeze_contract(rng):
    m = init(NetConfig(uncertainty_channels=2, widths=(4,)))
    x = rng.uniform(size=(8, 8, 8))
    before = predict(m, x)
    f = freeze(m)
    assert f.frozen and not m.frozen
    after = predict(f, x)
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    snapshot = f.checksum()
    for _ in range(100):
        tape = dk.Tape()
        logits, s = forward(f, x, tape)
        loss = dk.add(dk.mean(logits), dk.mean(s))
        grads = dk.backward(tape, loss)
        assert all(not np.any(g) for g in grads.values())
        assert not tape.params  # frozen tensors are never registered
        opt = dk.Adam({}, lr=1e-2)
        opt.step(grads)
    assert f.checksum() == snapshot
    with pytest.raises(ValueError):
        f.params["conv0.weight"][0, 0, 0, 0, 0] = 1.0


def test_checkpoint_roundtrip(tmp_path, rng):
    m = init(NetConfig(uncertainty_channels=3, channel_names=("task", "knoise", "lowpass"), seed=5),
             provenance="student")
    save_checkpoint(m, tmp_path / "ck", training_seed=11)
    back = load_checkpoint(tmp_path / "ck")
    assert back.checksum() == m.checksum()
    assert back.channel_names == ("task", "knoise", "lowpass")
    assert back.provenance == "student" and not back.frozen
    x = rng.uniform(size=(6, 6, 6))
    assert all(np.array_equal(a, b) for a, b in zip(predict(m, x), predict(back, x)))
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["training_seed"] == 11
    blob = (tmp_path / "ck" / "seg.bias.bin").read_bytes()
    assert np.array_equal(np.frombuffer(blob, dtype="<f8"), m.params["seg.bias"])
    save_checkpoint(freeze(m), tmp_path / "fz")
    assert load_checkpoint(tmp_path / "fz").frozen


def test_checkpoint_refuses_tampering(tmp_path):
    m = init(NetConfig())
    save_checkpoint(m, tmp_path)
    blob = tmp_path / "unc.bias.bin"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 1
    blob.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path)


def test_checkpoint_missing_and_shape(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    m = init(NetConfig())
    save_checkpoint(m, tmp_path)
    mp = tmp_path / "manifest.json"
    d = json.loads(mp.read_text())
    d["config"]["widths"] = [8, 16, 4]
    mp.write_text(json.dumps(d))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_param_shapes_head_order():
    shapes = param_shapes(NetConfig(uncertainty_channels=2))
    assert shapes["unc.weight"] == (2, 8, 1, 1, 1) and shapes["seg.weight"] == (3, 8, 1, 1, 1)
