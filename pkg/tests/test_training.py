import math

import pytest
import torch
import torch.nn as nn

from capgan import training
from capgan.checkpoint import Checkpoint
from capgan.config import RunConfig
from capgan.data import synthetic_dataset
from capgan.errors import ConfigError, InvalidCheckpointError, InvalidInputError, InvalidStateError
from capgan.models import ModelBundle
from capgan.training import (EmaState, discriminator_loss, ema_update, encoder_loss, generator_loss, r1_penalty,
                             train_phase1, train_phase2)
from oracles import central_difference, relative_error

LN2 = math.log(2.0)


# ---- losses

def test_generator_loss_examples():
    assert abs(generator_loss(torch.tensor([0.0], dtype=torch.float64)).item() - LN2) <= 1e-9
    assert abs(generator_loss(torch.tensor([0.0, 0.0], dtype=torch.float64)).item() - LN2) <= 1e-9
    assert generator_loss(torch.tensor([80.0])).item() < 1e-30


def test_discriminator_loss_examples():
    z = torch.zeros(3, dtype=torch.float64)
    assert abs(discriminator_loss(z, z, 0.0, 5.0).item() - 2 * LN2) <= 1e-9
    assert abs(discriminator_loss(z, z, 3.0, 5.0).item() - (2 * LN2 + 15.0)) <= 1e-9
    assert discriminator_loss(z, z, 3.0, 0.0).item() == discriminator_loss(z, z).item()


def test_softplus_forms_match_naive():
    logits = torch.linspace(-15, 15, 301, dtype=torch.float64)
    naive_g = -torch.log(torch.sigmoid(logits)).mean()
    naive_d = (-torch.log(torch.sigmoid(logits)) - torch.log(1 - torch.sigmoid(logits.flip(0)))).mean()
    assert abs(generator_loss(logits).item() - naive_g.item()) <= 1e-6
    assert abs(discriminator_loss(logits, logits.flip(0)).item() - naive_d.item()) <= 1e-6


def test_softplus_stays_finite_for_extreme_logits():
    big = torch.tensor([-1e4, 1e4])
    assert torch.isfinite(generator_loss(big))
    assert torch.isfinite(discriminator_loss(big, big))


def test_encoder_loss_examples():
    w = torch.randn(4, 5)
    assert encoder_loss(w, w).item() == 0.0
    e1 = torch.zeros(1, 5)
    e1[0, 0] = 1.0
    assert encoder_loss(e1, torch.zeros(1, 5)).item() == 1.0
    q = torch.tensor([[1.0, 0.0], [1.0, math.sqrt(2.0)]], dtype=torch.float64)
    assert abs(encoder_loss(q, torch.zeros(2, 2, dtype=torch.float64)).item() - 2.0) <= 1e-12
    with pytest.raises(InvalidInputError):
        encoder_loss(torch.zeros(2, 3), torch.zeros(2, 4))


# ---- R1

class ConstD(nn.Module):
    def __init__(self):
        super().__init__()
        self.c = nn.Parameter(torch.tensor(0.3))

    def forward(self, x):
        return self.c.expand(x.shape[0])


class LinearD(nn.Module):
    def __init__(self, a):
        super().__init__()
        self.a = a

    def forward(self, x):
        return (x.flatten(1) * self.a).sum(1)


def _mlp(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(nn.Flatten(), nn.Linear(12, 6), nn.Tanh(), nn.Linear(6, 1), nn.Flatten(0)).double()


def test_r1_constant_discriminator_zero():
    x = torch.randn(3, 1, 2, 2, requires_grad=True)
    assert r1_penalty(ConstD(), x).item() == 0.0


def test_r1_linear_discriminator():
    a = torch.randn(12, dtype=torch.float64)
    x = torch.randn(5, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    assert abs(r1_penalty(LinearD(a), x).item() - a.square().sum().item()) <= 1e-12


def test_r1_requires_grad_input():
    with pytest.raises(ConfigError):
        r1_penalty(_mlp(), torch.randn(2, 3, 2, 2, dtype=torch.float64))
    x = torch.randn(2, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    d = _mlp()
    with torch.no_grad():
        logits = d(x)
    with pytest.raises(ConfigError):
        r1_penalty(d, x, logits)


def test_r1_input_gradient_matches_finite_differences():
    d = _mlp(1)
    x = torch.randn(4, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    (grad,) = torch.autograd.grad(d(x).sum(), x)
    xd = x.detach().clone()
    (fd,) = central_difference(lambda: d(xd).sum(), [xd])
    assert relative_error(grad, fd) <= 1e-3
    expected = fd.square().flatten(1).sum(1).mean()
    assert abs(r1_penalty(d, x).item() - expected.item()) <= 1e-3 * expected.item()


def test_r1_parameter_gradient_matches_finite_differences():
    d = _mlp(2)
    x = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    params = list(d.parameters())
    r1 = r1_penalty(d, x.clone().requires_grad_(True))
    # the output bias does not reach the input gradient, so it gets a zero gradient
    analytic = [torch.zeros_like(p) if g is None else g
                for p, g in zip(params, torch.autograd.grad(r1, params, allow_unused=True))]

    def value():
        with torch.enable_grad():
            return r1_penalty(d, x.clone().requires_grad_(True)).item()

    numeric = central_difference(value, [p.data for p in params])
    for a, n in zip(analytic, numeric):
        if n.abs().max() == 0:
            assert not a.any()
        else:
            assert relative_error(a, n) <= 1e-3


# ---- EMA

def test_ema_two_updates():
    shadow = {"p": torch.zeros(3)}
    state = EmaState(shadow, decay=0.5)
    live = {"p": torch.ones(3)}
    ema_update(ema_update(state, live), live)
    assert torch.equal(shadow["p"], torch.full((3,), 0.75))


def test_ema_decay_zero_copies():
    state = EmaState({"p": torch.zeros(4)}, decay=0.0)
    live = {"p": torch.randn(4)}
    ema_update(state, live)
    assert torch.equal(state.shadow["p"], live["p"])


def test_ema_interval():
    state = EmaState({"p": torch.zeros(1)}, decay=0.5, interval=3)
    live = {"p": torch.ones(1)}
    for _ in range(2):
        ema_update(state, live)
    assert state.shadow["p"].item() == 0.0 and state.steps_since_update == 2
    ema_update(state, live)
    assert state.shadow["p"].item() == 0.5 and state.steps_since_update == 0


@pytest.mark.parametrize("decay", [0.9, 0.99, 0.5])
def test_ema_closed_form(decay):
    s0 = torch.randn(6, dtype=torch.float64)
    p = torch.randn(6, dtype=torch.float64)
    state = EmaState({"p": s0.clone()}, decay)
    k = 37
    for _ in range(k):
        ema_update(state, {"p": p})
    expected = decay ** k * s0 + (1 - decay ** k) * p
    torch.testing.assert_close(state.shadow["p"], expected, rtol=1e-12, atol=1e-12)


def test_ema_mismatch():
    state = EmaState({"p": torch.zeros(3)}, 0.9)
    with pytest.raises(InvalidStateError):
        ema_update(state, {"p": torch.zeros(4)})
    with pytest.raises(InvalidStateError):
        ema_update(state, {"q": torch.zeros(3)})


# ---- phase one

@pytest.fixture(scope="module")
def toy_data():
    cfg = RunConfig.toy()
    return synthetic_dataset(cfg.data.count, cfg.data.seed, cfg.data.image_size)


def _same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_phase1_zero_steps_is_initialization(toy_data):
    cfg = RunConfig.toy().with_overrides(["phase1.total_steps=0"])
    ck = train_phase1(cfg, toy_data)
    assert ck.phase == "phase1" and ck.step == 0
    assert _same_state(ck.nets, ModelBundle(cfg))


def test_phase1_bitwise_rerun(toy_data, tmp_path):
    cfg = RunConfig.toy().with_overrides(["phase1.total_steps=50"])
    a = train_phase1(cfg, toy_data, tmp_path / "a")
    b = train_phase1(cfg, toy_data, tmp_path / "b")
    assert _same_state(a.nets, b.nets)
    assert torch.equal(a.rng_state, b.rng_state)
    assert (tmp_path / "a" / "phase1.ckpt").read_bytes() == (tmp_path / "b" / "phase1.ckpt").read_bytes()
    assert (tmp_path / "a" / "phase1_log.csv").read_text() == (tmp_path / "b" / "phase1_log.csv").read_text()
    # the averaged copy moved away from the initialization, and the style mean was tracked
    init = ModelBundle(cfg)
    assert not torch.equal(a.nets.g_ema.block4.conv0.weight, init.g_ema.block4.conv0.weight)
    assert int(a.nets.w_avg.count) == 50


def test_phase1_outputs(toy_data, tmp_path):
    cfg = RunConfig.toy().with_overrides(["phase1.total_steps=6", "phase1.snapshot_steps=[3]",
                                          "phase1.sample_interval=3", "phase1.log_interval=2"])
    train_phase1(cfg, toy_data, tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"phase1.ckpt", "phase1_log.csv", "snapshot_000003.ckpt", "samples"} <= names
    assert sorted(p.name for p in (tmp_path / "samples").iterdir()) == ["final.png", "step_000003.png",
                                                                         "step_000006.png"]
    lines = (tmp_path / "phase1_log.csv").read_text().splitlines()
    assert lines[0].split(",") == list(training.PHASE1_FIELDS)
    assert len(lines) == 4


def test_phase1_rejects_mismatched_data(toy_data):
    cfg = RunConfig.toy().with_overrides(["synthesis.image_size=32", "data.image_size=32",
                                          'synthesis.channels={"4": 8, "8": 8, "16": 8, "32": 8}'])
    with pytest.raises(InvalidInputError):
        train_phase1(cfg, toy_data)


def test_phase1_divergence_saves_diagnostic(toy_data, tmp_path):
    cfg = RunConfig.toy().with_overrides(["phase1.total_steps=3", "phase1.lr=1e30"])
    from capgan.errors import TrainingDivergedError

    with pytest.raises(TrainingDivergedError) as info:
        train_phase1(cfg, toy_data, tmp_path)
    assert info.value.checkpoint_path and (tmp_path / "diverged.ckpt").exists()


# ---- phase two

@pytest.fixture(scope="module")
def toy_phase1(toy_data):
    return train_phase1(RunConfig.toy(), toy_data)


def test_phase2_freeze_and_isolation(toy_phase1):
    before = {k: v.clone() for k, v in toy_phase1.nets.state_dict().items()}
    out = train_phase2(toy_phase1)
    after = out.nets.state_dict()
    for k, v in before.items():
        assert torch.equal(v, after[k]), k
        assert v.numpy().tobytes() == after[k].numpy().tobytes()
    for m in out.nets.phase1_modules():
        for p in m.parameters():
            assert p.grad is None or not p.grad.any()
    assert out.phase == "phase2" and out.nets.has_encoder
    # the input checkpoint is untouched
    assert not toy_phase1.nets.has_encoder


def test_phase2_deterministic(toy_phase1):
    a, b = train_phase2(toy_phase1), train_phase2(toy_phase1)
    assert _same_state(a.nets.e, b.nets.e)
    assert a.extra == b.extra


def test_phase2_needs_trained_checkpoint():
    cfg = RunConfig.toy()
    with pytest.raises(InvalidCheckpointError):
        train_phase2(Checkpoint(cfg, ModelBundle(cfg), phase="none"))


def test_phase2_rejects_other_generator(toy_phase1):
    cfg = RunConfig.toy().with_overrides(["synthesis.d_z=8"])
    with pytest.raises(ConfigError):
        train_phase2(toy_phase1, cfg)


def test_phase2_toy_loss_halves():
    cfg = RunConfig.toy().with_overrides([
        "synthesis.image_size=32", "data.image_size=32", "synthesis.d_z=64", "synthesis.d_style=64",
        'synthesis.channels={"4": 16, "8": 16, "16": 8, "32": 8}', "encoder.depths=[16, 32, 64, 64]",
        "phase1.total_steps=0", "phase2.epochs=5", "phase2.pool_size=512", "phase2.holdout_size=128",
        "phase2.batch_size=16", 'phase2.filter={"mode": "low", "cutoff": 5, "combiner": "and"}'])
    ck = train_phase1(cfg, synthetic_dataset(16, 0, 32))
    out = train_phase2(ck)
    assert out.extra["final_loss"] <= 0.5 * out.extra["initial_loss"], out.extra
