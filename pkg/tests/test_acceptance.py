"""Acceptance suite. Each test carries a ``criterion`` marker; the terminal summary
prints one PASS/FAIL line per criterion.

Criteria 6 (desk part), 8 and 9 read the desk run directory (``CAPGAN_DESK_RUN``,
default ``runs/desk``) and run the full experiment there first if it is missing.
"""

import csv
import json
import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch

from capgan import freqsel as fs
from capgan import metrics
from capgan.checkpoint import load_checkpoint, save_checkpoint
from capgan.cli import main
from capgan.config import RunConfig
from capgan.content_encoder import EncoderConfig, FrequencyEncoder
from capgan.data import (extract_attributes_oracle, render_synthetic, sample_attributes, save_png,
                         synthetic_dataset)
from capgan.experiment import run_experiment
from capgan.sampling import sample_images
from capgan.synthesis import Discriminator, SynthesisConfig
from capgan.training import (EmaState, discriminator_loss, ema_update, encoder_loss, generator_loss, r1_penalty,
                             train_phase1, train_phase2)
from oracles import central_difference, direct_dft, direct_idft, knn_precision_bruteforce, relative_error

ROOT = Path(__file__).resolve().parents[1]
DESK_RUN = Path(os.environ.get("CAPGAN_DESK_RUN", ROOT / "runs" / "desk"))
LN2 = math.log(2.0)


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert elapsed < self.seconds, f"took {elapsed:.1f}s, budget {self.seconds}s"


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "spectral suite on 100 random 128x128 images")
def test_spectral_suite():
    rng = np.random.default_rng(1)
    filters = [fs.FilterSpec(m, b, c) for m in ("low", "high") for b in (0, 5, 20, 64) for c in fs.COMBINERS]
    with Budget(60):
        for i in range(100):
            x = rng.uniform(-1, 1, size=(128, 128))
            y = rng.uniform(-1, 1, size=(128, 128))
            sx = fs.dft2(x)
            assert np.abs(fs.idft2(sx) - x).max() <= 1e-9
            energy = (x ** 2).sum()
            assert abs((np.abs(sx.data) ** 2).sum() / x.size - energy) <= 1e-9 * energy
            a, b = rng.normal(size=2)
            lin = fs.dft2(a * x + b * y).data - (a * sx.data + b * fs.dft2(y).data)
            assert np.abs(lin).max() <= 1e-9 * np.abs(sx.data).max()
            f = filters[i % len(filters)]
            once = fs.band_filter(fs.shift_center(sx), f)
            np.testing.assert_array_equal(fs.band_filter(once, f).data, once.data)
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                _, residue = fs.idft2(once, return_residue=True)
            assert residue <= 1e-9


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "dft2/idft2 against the direct double sum")
@pytest.mark.parametrize("size", [4, 8])
def test_direct_sum_oracle(size):
    rng = np.random.default_rng(size)
    with Budget(60):
        for _ in range(20):
            x = rng.normal(size=(size, size))
            got = fs.dft2(x).data
            want = direct_dft(x)
            assert np.abs(got - want).max() <= 1e-9 * np.abs(want).max()
            f = fs.FilterSpec(str(rng.choice(["low", "high"])), int(rng.integers(0, size // 2 + 1)),
                              str(rng.choice(fs.COMBINERS)))
            y = fs.unshift_center(fs.band_filter(fs.shift_center(fs.Spectrum(want, centered=False)), f)).data
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                back = fs.idft2(fs.Spectrum(y, centered=False))
            ref = direct_idft(y).real
            assert np.abs(back - ref).max() <= 1e-9 * max(np.abs(ref).max(), 1e-300)


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3, "gradient checks against central differences")
def test_encoder_gradient():
    with Budget(300):
        torch.manual_seed(0)
        enc = FrequencyEncoder(EncoderConfig(depths=[4, 4, 8, 8], d_style=8, in_size=16)).double().train()
        gen = torch.Generator().manual_seed(1)
        x = torch.rand(3, 1, 16, 16, generator=gen, dtype=torch.float64)
        w1 = torch.randn(3, 8, generator=gen, dtype=torch.float64)
        xg = x.clone().requires_grad_(True)
        encoder_loss(enc(xg), w1).backward()
        params = list(enc.parameters())
        fd = central_difference(lambda: encoder_loss(enc(x), w1), [p.data for p in params] + [x])
        for (name, p), g in zip(enc.named_parameters(), fd):
            assert relative_error(p.grad, g) <= 1e-3, name
        assert relative_error(xg.grad, fd[-1]) <= 1e-3


@pytest.mark.criterion(3, "gradient checks against central differences")
def test_r1_gradient():
    with Budget(300):
        torch.manual_seed(0)
        d = Discriminator(SynthesisConfig(image_size=16, d_z=8, d_style=8, channels={4: 4, 8: 4, 16: 4},
                                          mapping_depth=1)).double()
        x = torch.randn(4, 3, 16, 16, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        # the penalty's inner gradient against differences of D itself
        xi = x.clone().requires_grad_(True)
        (grad,) = torch.autograd.grad(d(xi).sum(), xi)
        xd = x.clone()
        (fd_x,) = central_difference(lambda: d(xd).sum(), [xd])
        assert relative_error(grad, fd_x) <= 1e-3
        value = r1_penalty(d, x.clone().requires_grad_(True)).item()
        expected = fd_x.square().flatten(1).sum(1).mean().item()
        assert abs(value - expected) <= 1e-3 * expected
        # outer gradient of the penalty with respect to D's parameters
        params = list(d.parameters())
        r1 = r1_penalty(d, x.clone().requires_grad_(True))
        analytic = [torch.zeros_like(p) if g is None else g
                    for p, g in zip(params, torch.autograd.grad(r1, params, allow_unused=True))]

        def value_fn():
            with torch.enable_grad():
                return r1_penalty(d, x.clone().requires_grad_(True)).item()

        numeric = central_difference(value_fn, [p.data for p in params])
        for (name, _), a, n in zip(d.named_parameters(), analytic, numeric):
            if n.abs().max() == 0:
                assert not a.any(), name
            else:
                assert relative_error(a, n) <= 1e-3, name


# ---------------------------------------------------------------- 4

@pytest.mark.criterion(4, "loss and EMA closed forms")
def test_loss_and_ema_closed_forms():
    with Budget(60):
        z = torch.zeros(5, dtype=torch.float64)
        assert abs(generator_loss(z).item() - LN2) <= 1e-9
        assert abs(discriminator_loss(z, z, 0.0, 5.0).item() - 2 * LN2) <= 1e-9
        assert abs(discriminator_loss(z, z, 0.0, 0.0).item() - 2 * LN2) <= 1e-9
        state = EmaState({"w": torch.tensor([0.0])}, decay=0.5)
        for _ in range(2):
            state = ema_update(state, {"w": torch.tensor([1.0])})
        assert state.shadow["w"].item() == 0.75
        w = torch.randn(4, 6, dtype=torch.float64)
        assert encoder_loss(w, w).item() == 0.0
        e1 = torch.zeros(1, 6)
        e1[0, 2] = 1.0
        assert encoder_loss(e1, torch.zeros(1, 6)).item() == 1.0
        q = torch.tensor([[1.0, 0.0], [1.0, math.sqrt(2.0)]], dtype=torch.float64)
        assert abs(encoder_loss(q, torch.zeros(2, 2, dtype=torch.float64)).item() - 2.0) <= 1e-12


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5, "metric oracles")
def test_metric_oracles():
    rng = np.random.default_rng(5)
    with Budget(120):
        x = rng.normal(size=(400, 6))
        assert metrics.fid(x, x) <= 1e-6
        base = rng.normal(size=1000)
        base = (base - base.mean()) / base.std(ddof=1)
        # means 0 and 2, standard deviations 1 and 3: (0-2)^2 + (1-3)^2 = 8
        assert abs(metrics.fid(base[:, None], (3 * base + 2)[:, None]) - 8.0) <= 1e-3
        for _ in range(50):
            n = int(rng.integers(5, 201))
            dim = int(rng.integers(1, 5))
            real = rng.normal(size=(n, dim))
            fake = rng.normal(0.3, 1.2, size=(int(rng.integers(1, 60)), dim))
            k = int(rng.integers(1, min(n, 10)))
            assert metrics.knn_precision(real, fake, k) == knn_precision_bruteforce(real, fake, k)
            ks = range(1, min(n, 8))
            values = [metrics.knn_precision(real, fake, kk) for kk in ks]
            assert all(a <= b for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------- shared toy run

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    cfg = RunConfig.toy()
    p1 = train_phase1(cfg, synthetic_dataset(cfg.data.count, cfg.data.seed, cfg.data.image_size), out)
    return out, p1


def _phase1_bytes(ck):
    return {k: v.numpy().tobytes() for k, v in ck.nets.state_dict().items() if not k.startswith("e.")}


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6, "phase1 networks untouched by encoder training")
def test_freeze_contract_toy(toy):
    _, p1 = toy
    before = _phase1_bytes(p1)
    after = _phase1_bytes(train_phase2(p1))
    assert before.keys() == after.keys()
    assert all(before[k] == after[k] for k in before)


@pytest.fixture(scope="module")
def desk():
    if not (DESK_RUN / "experiment.json").is_file():
        run_experiment(RunConfig.desk(), DESK_RUN)
    return json.loads((DESK_RUN / "experiment.json").read_text())


@pytest.mark.criterion(6, "phase1 networks untouched by encoder training")
def test_freeze_contract_desk(desk):
    before = _phase1_bytes(load_checkpoint(DESK_RUN / "phase1.ckpt"))
    after = _phase1_bytes(load_checkpoint(DESK_RUN / "phase2.ckpt"))
    assert before.keys() == after.keys()
    assert all(before[k] == after[k] for k in before)


# ---------------------------------------------------------------- 7

@pytest.mark.criterion(7, "truncation collapse and truncation sweep table")
def test_truncation_collapse(toy, tmp_path):
    out, p1 = toy
    with Budget(300):
        imgs = sample_images(p1.nets, 64, seed=3, psi=0.0, noise_mode="const")
        first = imgs[0].numpy().tobytes()
        assert all(img.numpy().tobytes() == first for img in imgs)
        assert main(["sweep", "trunc", "--ckpt", str(out / "phase1.ckpt"), "--out", str(tmp_path)]) == 0
        with open(tmp_path / "sweep_truncation.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {"psi", "fid", "precision", "fid_normalized", "one_minus_precision"} <= set(rows[0])
        assert [float(r["psi"]) for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]
        for r in rows:
            assert 0.0 <= float(r["fid_normalized"]) <= 1.0
            assert 0.0 <= float(r["one_minus_precision"]) <= 1.0
        assert (tmp_path / "sweep_truncation.png").is_file()


# ---------------------------------------------------------------- 8

@pytest.mark.criterion(8, "desk experiment trends")
def test_desk_experiment(desk):
    cfg = RunConfig.load(DESK_RUN / "config.json")
    assert cfg.config_hash() == RunConfig.desk().config_hash() == desk["config_hash"]
    ds = synthetic_dataset(cfg.data.count, cfg.data.seed, cfg.data.image_size)
    assert len(ds) == 5000 and ds.image_size == 32
    assert {a.shape_class for a in ds.attributes} == {"circle", "triangle", "square"}
    assert cfg.phase1.batch_size == 16
    assert (desk["early_step"], desk["final_step"]) == (500, 10000)
    print(f"FID live {desk['fid_early_live']:.4f} -> {desk['fid_final_live']:.4f} "
          f"(ratio {desk['fid_ratio_live']:.3f}); EMA ratio {desk['fid_ratio_ema']:.3f}")
    assert desk["fid_ratio_live"] <= 0.7
    assert cfg.phase2.epochs == 20
    assert (cfg.phase2.filter.mode, cfg.phase2.filter.cutoff) == ("low", 5)
    assert cfg.synthesis.image_size // 2 == 16
    print(f"encoder loss {desk['encoder_initial_loss']:.4f} -> {desk['encoder_final_loss']:.4f} "
          f"(ratio {desk['encoder_loss_ratio']:.3f})")
    assert desk["encoder_loss_ratio"] <= 0.2
    # the same held-out pool scored with running batch-norm statistics
    ck = load_checkpoint(DESK_RUN / "phase2.ckpt")
    assert ck.extra["final_loss_eval"] <= 0.2 * ck.extra["initial_loss_eval"]


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9, "guided shape match above chance")
def test_content_above_chance(desk):
    test = desk["content_test"]
    print(f"shape match {test['matches']}/{test['n']} = {test['rate']:.3f}, p = {test['p_value']:.3g}, "
          f"CI [{test['ci_low']:.3f}, {test['ci_high']:.3f}]")
    assert test["n"] == 500
    assert test["rate"] > 1 / 3 and test["p_value"] < 0.01
    report = (DESK_RUN / "report.txt").read_text()
    for key in ("content_test.p_value", "content_test.rate", "content_test.ci_low", "content_test.ci_high"):
        assert key + ":" in report


# ---------------------------------------------------------------- 10

@pytest.mark.criterion(10, "attribute oracle recovers rendered records")
def test_data_oracle():
    with Budget(120):
        for i in range(1000):
            r = sample_attributes(7, i)
            e = extract_attributes_oracle(render_synthetic(r, 32))
            assert e is not None, i
            assert (e.shape_class, e.fg_hue, e.bg_hue) == (r.shape_class, r.fg_hue, r.bg_hue), i
            for key in ("cx", "cy", "size"):
                assert abs(getattr(e, key) - getattr(r, key)) <= 0.02, (i, key)


# ---------------------------------------------------------------- 11

@pytest.mark.criterion(11, "bitwise persistence and reproducible CLI artifacts")
def test_checkpoint_roundtrip(toy, tmp_path):
    _, p1 = toy
    for ck in (p1, train_phase2(p1)):
        back = load_checkpoint(save_checkpoint(ck, tmp_path / "a.ckpt"))
        sa, sb = ck.nets.state_dict(), back.nets.state_dict()
        assert sa.keys() == sb.keys()
        assert all(sa[k].numpy().tobytes() == sb[k].numpy().tobytes() for k in sa)
        assert torch.equal(ck.rng_state, back.rng_state)
        save_checkpoint(back, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def _tree(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(11, "bitwise persistence and reproducible CLI artifacts")
def test_cli_reruns_identical(tmp_path):
    guide = tmp_path / "guide.png"
    save_png(guide, render_synthetic(sample_attributes(5, 0), 16))
    toy = ["--preset", "toy"]

    def verbs(out: Path):
        p1, p2 = out / "p1" / "phase1.ckpt", out / "p2" / "phase2.ckpt"
        return [
            ["synth-data", *toy, "--count", "4", "--out", out / "data"],
            ["train-phase1", *toy, "--out", out / "p1"],
            ["train-phase2", "--ckpt", p1, "--out", out / "p2"],
            ["generate", "--ckpt", p1, "--count", "4", "--out", out / "gen"],
            ["generate", "--ckpt", p2, "--guide", guide, "--count", "4", "--out", out / "guided"],
            ["freq", "analyze", "--image", guide, "--cutoff", "2", "--out", out / "freq"],
            ["evaluate", "--ckpt", p2, "--out", out / "eval"],
            ["sweep", "trunc", "--ckpt", p1, "--psis", "0,1", "--out", out / "trunc"],
            ["sweep", "freq", "--ckpt", p1, "--cutoffs", "2", "--modes", "low", "--out", out / "sfreq"],
            ["sweep", "emblocks", "--ckpt", p1, "--counts", "1", "--out", out / "emb"],
            ["experiment", *toy, "--set", "phase1.snapshot_steps=[5]", "--out", out / "exp"],
        ]

    for name in ("a", "b"):
        for argv in verbs(tmp_path / name):
            assert main([str(a) for a in argv]) == 0, argv
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 30
    assert [k for k in a if a[k] != b[k]] == []
