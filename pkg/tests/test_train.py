import math

import numpy as np
import pytest
import torch

from spikesr import checkpoint
from spikesr.autodiff import NonFiniteError
from spikesr.data import degrade
from spikesr.model import ModelConfig, build_model
from spikesr.train import OptimState, TrainConfig, _prefetch, adam_step, evaluate, make_batch, train

CFG = ModelConfig(variant="custom", channels=4, ca_embed=4, mlp_hidden=8, num_sag=1, num_sab=1, time_steps=2,
                  hda_reduction=2)


def pairs(n=3, side=32, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        hr = rng.random((side, side, 3))
        out.append((f"img{i}", hr, degrade(hr, 4)))
    return out


def test_adam_first_step_unit_gradient():
    p = {"w": torch.zeros(5)}
    st = adam_step(p, {"w": torch.ones(5)}, OptimState())
    assert st.step == 1
    assert torch.allclose(p["w"], torch.full((5,), -1e-4 / (1 + 1e-8)), rtol=0, atol=1e-18)


def test_adam_zero_gradient_keeps_params():
    p = {"w": torch.tensor([1.0, -2.0])}
    st = OptimState(m={"w": torch.tensor([0.5, 0.5])}, v={"w": torch.tensor([0.0, 0.0])}, step=3)
    before = p["w"].clone()
    adam_step(p, {}, st)
    assert torch.equal(st.m["w"], torch.tensor([0.45, 0.45]))
    assert not torch.equal(p["w"], before)  # the stored first moment still moves it
    p = {"w": torch.tensor([1.0, -2.0])}
    st = OptimState()
    adam_step(p, {"w": torch.zeros(2)}, st)
    assert torch.equal(p["w"], torch.tensor([1.0, -2.0]))
    assert torch.equal(st.m["w"], torch.zeros(2)) and torch.equal(st.v["w"], torch.zeros(2))


def test_adam_two_steps_on_quadratic():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x = 1.0
    m = v = 0.0
    traj = []
    for t in (1, 2):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        traj.append(x)
    p = {"x": torch.tensor(1.0)}
    st = OptimState(lr=lr)
    for want in traj:
        adam_step(p, {"x": 2 * p["x"].clone()}, st)
        assert abs(p["x"].item() - want) < 1e-15
    # hand-evaluated: step 1 moves by lr exactly (up to eps), step 2 again by ~lr
    assert traj[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_shape_error():
    with pytest.raises(ValueError):
        adam_step({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, OptimState())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="huber")


def test_batches_are_pure_functions_of_step():
    ps = pairs()
    t = TrainConfig(batch_size=2, lr_patch=4, seed=5)
    a = make_batch(ps, t, 4, 6)
    b = make_batch(ps, t, 4, 6)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert a[0].shape == (2, 3, 4, 4) and a[1].shape == (2, 3, 16, 16)
    # last batch of an epoch holds the remainder
    assert make_batch(ps, t, 4, 7)[0].shape[0] == 1


def test_prefetch_order_and_errors():
    assert list(_prefetch(lambda s: s * s, range(6), 2)) == [0, 1, 4, 9, 16, 25]

    def bad(s):
        if s == 3:
            raise RuntimeError("broken image")
        return s

    with pytest.raises(RuntimeError):
        list(_prefetch(bad, range(6), 2))


def run(tmp_path, steps, name, resume=None, ckpt_every=0, seed=0):
    t = TrainConfig(batch_size=2, lr_patch=8, max_steps=steps, seed=seed, ckpt_every=ckpt_every, log_every=0)
    return train(t, CFG, pairs(), tmp_path / name, resume=resume)


def test_training_reduces_loss(tmp_path):
    _, res = run(tmp_path, 30, "a")
    assert len(res.losses) == 30
    assert np.mean(res.losses[-5:]) < np.mean(res.losses[:5])
    assert (tmp_path / "a" / "last.spsr").exists()


def test_identical_runs_write_identical_bytes(tmp_path):
    torch.use_deterministic_algorithms(True)
    try:
        run(tmp_path, 4, "a")
        run(tmp_path, 4, "b")
    finally:
        torch.use_deterministic_algorithms(False)
    assert (tmp_path / "a" / "last.spsr").read_bytes() == (tmp_path / "b" / "last.spsr").read_bytes()


def test_resume_is_bit_exact(tmp_path):
    _, full = run(tmp_path, 6, "full", ckpt_every=3)
    ck = tmp_path / "full" / "ckpt_0000003.spsr"
    assert checkpoint.read(ck).meta["step"] == 3
    _, resumed = run(tmp_path, 6, "resumed", resume=ck)
    assert resumed.losses == full.losses[3:]
    a = checkpoint.read(tmp_path / "full" / "last.spsr").tensors
    b = checkpoint.read(tmp_path / "resumed" / "last.spsr").tensors
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_resume_rejects_other_config(tmp_path):
    run(tmp_path, 1, "a")
    other = ModelConfig(**{**CFG.__dict__, "channels": 8})
    t = TrainConfig(batch_size=2, lr_patch=8, max_steps=2, log_every=0)
    with pytest.raises(ValueError):
        train(t, other, pairs(), tmp_path / "b", resume=tmp_path / "a" / "last.spsr")


def test_non_finite_loss_aborts():
    m = build_model(CFG)
    with torch.no_grad():
        m.up.bias.fill_(float("nan"))
    t = TrainConfig(batch_size=2, lr_patch=8, max_steps=2, log_every=0)
    with pytest.raises(NonFiniteError):
        train(t, CFG, pairs(), model=m)


def test_validation_and_evaluate(tmp_path):
    t = TrainConfig(batch_size=2, lr_patch=8, max_steps=4, val_every=2, log_every=0)
    model, res = train(t, CFG, pairs(), val_pairs=pairs(1, seed=9))
    assert [s for s, _ in res.val_psnr] == [2, 4]
    rep = evaluate(model, pairs(2, seed=4))
    assert len(rep.rows) == 2 and model.training
    assert rep.spike_rate


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(TrainConfig(), CFG, [])
