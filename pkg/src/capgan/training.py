"""Adversarial training of mapping + generator against the discriminator, then
self-supervised training of the frequency encoder against known styles.

The first phase alternates one discriminator step (non-saturating loss plus R1
on real images) with one generator step, keeps an exponential moving average
of mapping/generator weights and a running mean of mapped styles. The second
phase freezes everything from the first, draws (z1, z2) pairs, renders
G(w1 coarse, w2 fine), refines the renders in frequency space and regresses
the encoder output onto w1.
"""

import copy
import csv
import hashlib
import logging
import math
from pathlib import Path
from typing import Callable, Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as datamod
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, InvalidCheckpointError, InvalidInputError, InvalidStateError, TrainingDivergedError
from .freqsel import refine_batch
from .models import ModelBundle

log = logging.getLogger(__name__)

PHASE1_FIELDS = ("step", "d_loss", "g_loss", "r1", "d_real_acc", "d_fake_acc", "mixed_frac")
PHASE2_FIELDS = ("epoch", "steps", "train_loss", "holdout_loss", "holdout_loss_eval")
GRID_SAMPLES = 16


# ---------------------------------------------------------------------------
# losses


def generator_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Mean of -log sigmoid(logit), computed as softplus(-logit)."""
    return F.softplus(-fake_logits).mean()


def discriminator_loss(real_logits, fake_logits, r1=0.0, r1_lambda: float = 0.0) -> torch.Tensor:
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean() + r1_lambda * r1


def r1_penalty(discriminator: nn.Module, real: torch.Tensor, logits: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Batch mean of the squared L2 norm of dD/dx at the real images.

    ``real`` must require gradients; pass ``logits`` to reuse an existing forward pass.
    """
    if not real.requires_grad:
        raise ConfigError("r1_penalty needs a real batch with requires_grad=True")
    if logits is None:
        logits = discriminator(real)
    if not logits.requires_grad:
        raise ConfigError("discriminator output carries no gradient (was it run under no_grad?)")
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        # the output does not depend on the input at all
        return real.new_zeros(())
    return grad.square().flatten(1).sum(dim=1).mean()


def encoder_loss(q: torch.Tensor, w1: torch.Tensor) -> torch.Tensor:
    """Batch mean of squared L2 distances between content vectors and target styles."""
    if q.shape != w1.shape or q.ndim != 2:
        raise InvalidInputError(f"encoder_loss needs matching (batch, d_style) tensors, got {tuple(q.shape)} "
                                f"and {tuple(w1.shape)}")
    return (q - w1).square().sum(dim=1).mean()


# ---------------------------------------------------------------------------
# weight averaging


def named_parameters(modules: Dict[str, nn.Module]) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{name}": p for prefix, m in modules.items() for name, p in m.named_parameters()}


class EmaState:
    """Shadow tensors blended toward live ones once every ``interval`` calls to :func:`ema_update`."""

    def __init__(self, shadow: Dict[str, torch.Tensor], decay: float, interval: int = 1,
                 steps_since_update: int = 0):
        if not 0.0 <= decay <= 1.0 or interval < 1:
            raise ConfigError("EMA needs decay in [0, 1] and interval >= 1")
        self.shadow = shadow
        self.decay = decay
        self.interval = interval
        self.steps_since_update = steps_since_update

    @classmethod
    def from_modules(cls, modules: Dict[str, nn.Module], decay: float, interval: int = 1,
                     steps_since_update: int = 0) -> "EmaState":
        return cls(named_parameters(modules), decay, interval, steps_since_update)


@torch.no_grad()
def ema_update(state: EmaState, live: Dict[str, torch.Tensor]) -> EmaState:
    if live.keys() != state.shadow.keys():
        raise InvalidStateError("EMA shadow and live parameter names differ")
    for name, s in state.shadow.items():
        if s.shape != live[name].shape:
            raise InvalidStateError(f"EMA shape mismatch for {name}: {tuple(s.shape)} vs {tuple(live[name].shape)}")
    state.steps_since_update += 1
    if state.steps_since_update >= state.interval:
        state.steps_since_update = 0
        for name, s in state.shadow.items():
            s.mul_(state.decay).add_(live[name].detach(), alpha=1.0 - state.decay)
    return state


# ---------------------------------------------------------------------------
# sampling helpers


def sample_styles(mapping, g, batch: int, generator: torch.Generator, mix_prob: float):
    """Returns (w1, per-site styles, mixed). With probability ``mix_prob`` the fine
    sites get the style of a second latent."""
    d_z = g.cfg.d_z
    z1 = torch.randn(batch, d_z, generator=generator)
    mixed = torch.rand((), generator=generator).item() < mix_prob
    w1 = mapping(z1)
    if mixed:
        w2 = mapping(torch.randn(batch, d_z, generator=generator))
        return w1, g.mix(w1, w2), True
    return w1, g.broadcast(w1), False


def _finite(*values) -> bool:
    return all(math.isfinite(float(v.detach() if torch.is_tensor(v) else v)) for v in values)


class _CsvLog:
    def __init__(self, path: Optional[Path], fields):
        self.fields = fields
        self.fh = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.writer = csv.DictWriter(self.fh, fieldnames=fields)
            self.writer.writeheader()

    def write(self, row):
        if self.fh is not None:
            self.writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


@torch.no_grad()
def save_sample_grid(nets: ModelBundle, path, seed: int, count: int = GRID_SAMPLES) -> None:
    s = nets.g_ema.cfg
    z = torch.randn(count, s.d_z, generator=torch.Generator().manual_seed(seed))
    imgs = nets.g_ema(nets.g_ema.broadcast(nets.map_ema(z)), noise_mode="const")
    cols = int(math.ceil(math.sqrt(count)))
    datamod.save_png(path, datamod.image_grid(datamod.to_unit_range(imgs), cols))


# ---------------------------------------------------------------------------
# phase one


def train_phase1(cfg: RunConfig, dataset: datamod.ImageDataset, out_dir=None,
                 on_log: Optional[Callable[[dict], None]] = None) -> Checkpoint:
    """Train from the seeded initialization for ``cfg.phase1.total_steps`` steps.

    With ``out_dir`` set, writes ``phase1_log.csv``, sample grids under
    ``samples/``, ``snapshot_<step>.ckpt`` for each configured snapshot step and
    ``phase1.ckpt`` at the end.
    """
    cfg.validate()
    p1 = cfg.phase1
    if len(dataset) == 0:
        raise InvalidInputError("training dataset is empty")
    if dataset.image_size != cfg.synthesis.image_size:
        raise InvalidInputError(f"dataset images are {dataset.image_size} px but the generator makes "
                                f"{cfg.synthesis.image_size} px")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    nets = ModelBundle(cfg)
    gen = torch.Generator().manual_seed(p1.seed)
    betas = tuple(float(b) for b in p1.betas)
    opt_g = torch.optim.Adam(list(nets.map.parameters()) + list(nets.g.parameters()), lr=p1.lr, betas=betas)
    opt_d = torch.optim.Adam(nets.d.parameters(), lr=p1.lr, betas=betas)
    ema = EmaState.from_modules({"map": nets.map_ema, "g": nets.g_ema}, p1.ema_decay, p1.ema_interval)
    live = named_parameters({"map": nets.map, "g": nets.g})
    batches = dataset.infinite(p1.batch_size, gen)
    csv_log = _CsvLog(out / "phase1_log.csv" if out else None, PHASE1_FIELDS)
    window = {k: 0.0 for k in PHASE1_FIELDS[1:]}
    window_n = 0

    def checkpoint(step):
        return Checkpoint(cfg, nets, "phase1", step, gen.get_state(), ema.steps_since_update)

    try:
        for step in range(1, p1.total_steps + 1):
            # discriminator step
            real = next(batches)
            with torch.no_grad():
                _, ws, _ = sample_styles(nets.map, nets.g, p1.batch_size, gen, p1.mix_prob)
                fake = nets.g(ws, noise_mode="random", generator=gen)
            do_r1 = p1.r1_lambda > 0 and step % p1.r1_interval == 0
            real = real.detach().requires_grad_(do_r1)
            real_logits = nets.d(real)
            fake_logits = nets.d(fake)
            r1 = r1_penalty(nets.d, real, real_logits) if do_r1 else real_logits.new_zeros(())
            d_loss = discriminator_loss(real_logits, fake_logits, r1, p1.r1_lambda * p1.r1_interval if do_r1 else 0.0)
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()

            # generator step
            nets.d.requires_grad_(False)
            w1, ws, mixed = sample_styles(nets.map, nets.g, p1.batch_size, gen, p1.mix_prob)
            nets.w_avg.update(w1)
            g_loss = generator_loss(nets.d(nets.g(ws, noise_mode="random", generator=gen)))
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_g.step()
            nets.d.requires_grad_(True)
            ema_update(ema, live)

            if not _finite(d_loss, g_loss, r1):
                raise TrainingDivergedError(f"non-finite loss at step {step} (d_loss={d_loss.item()}, "
                                            f"g_loss={g_loss.item()}, r1={r1.item()})")

            window["d_loss"] += d_loss.item()
            window["g_loss"] += g_loss.item()
            window["r1"] += r1.item()
            window["d_real_acc"] += float((real_logits > 0).float().mean())
            window["d_fake_acc"] += float((fake_logits < 0).float().mean())
            window["mixed_frac"] += float(mixed)
            window_n += 1
            if step % p1.log_interval == 0 or step == p1.total_steps:
                row = {"step": step, **{k: v / window_n for k, v in window.items()}}
                csv_log.write(row)
                if on_log is not None:
                    on_log(row)
                window = {k: 0.0 for k in window}
                window_n = 0
            if out is not None and step in p1.snapshot_steps:
                save_checkpoint(checkpoint(step), out / f"snapshot_{step:06d}.ckpt")
            if out is not None and p1.sample_interval and step % p1.sample_interval == 0:
                (out / "samples").mkdir(exist_ok=True)
                save_sample_grid(nets, out / "samples" / f"step_{step:06d}.png", cfg.seed)
    except TrainingDivergedError as exc:
        if out is not None:
            exc.checkpoint_path = str(save_checkpoint(checkpoint(step), out / "diverged.ckpt"))
            log.error("saved diagnostic checkpoint to %s", exc.checkpoint_path)
        raise
    finally:
        csv_log.close()

    result = checkpoint(p1.total_steps)
    if out is not None:
        save_checkpoint(result, out / "phase1.ckpt")
        if p1.sample_interval:
            (out / "samples").mkdir(exist_ok=True)
            save_sample_grid(nets, out / "samples" / "final.png", cfg.seed)
    return result


# ---------------------------------------------------------------------------
# phase two


@torch.no_grad()
def make_pairs(mapping, g, n: int, generator: torch.Generator, filter_spec, luma, chunk: int = 64):
    """n training pairs (x_f, w1): refined renders of G(w1 coarse, w2 fine) and their coarse style."""
    d_z = g.cfg.d_z
    z1 = torch.randn(n, d_z, generator=generator)
    z2 = torch.randn(n, d_z, generator=generator)
    xs, ws = [], []
    for start in range(0, n, chunk):
        w1 = mapping(z1[start:start + chunk])
        w2 = mapping(z2[start:start + chunk])
        x = g(g.mix(w1, w2), noise_mode="random", generator=generator)
        xs.append(refine_batch(x, filter_spec, luma))
        ws.append(w1)
    return torch.cat(xs), torch.cat(ws)


def _chunks(n: int, size: int):
    """Index ranges of at most ``size``; a trailing singleton joins the previous chunk (batch-norm needs >= 2)."""
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)
    return list(zip(bounds[:-1], bounds[1:]))


@torch.no_grad()
def evaluate_encoder(encoder, x_f, w1, batch_size: int, train_mode: bool = True) -> float:
    """Mean encoder loss over a fixed set. ``train_mode`` uses per-batch normalization
    statistics on a copy so the live running statistics are left alone."""
    enc = copy.deepcopy(encoder)
    enc.train(train_mode)
    total = 0.0
    for a, b in _chunks(len(x_f), batch_size):
        total += float(encoder_loss(enc(x_f[a:b]), w1[a:b])) * (b - a)
    return total / len(x_f)


def state_digest(modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_phase2(ckpt: Checkpoint, cfg: Optional[RunConfig] = None, out_dir=None,
                 on_log: Optional[Callable[[dict], None]] = None) -> Checkpoint:
    """Train a fresh frequency encoder on pairs rendered by the frozen first-phase networks.

    ``cfg`` defaults to the checkpoint's config; its synthesis section must match.
    The input checkpoint is not modified.
    """
    if ckpt.phase not in ("phase1", "phase2"):
        raise InvalidCheckpointError(f"train_phase2 needs trained first-phase parameters; checkpoint phase is "
                                     f"{ckpt.phase!r}")
    cfg = ckpt.config if cfg is None else cfg
    cfg.validate()
    if cfg.synthesis != ckpt.config.synthesis:
        raise ConfigError("synthesis settings differ from the ones the checkpoint was trained with")
    p2 = cfg.phase2
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    nets = copy.deepcopy(ckpt.nets)
    frozen = list(nets.phase1_modules())
    for m in frozen:
        m.requires_grad_(False)
    before = state_digest(frozen)
    mapping, g = nets.style_source(p2.use_ema)
    encoder = nets.attach_encoder(cfg, p2.seed)
    encoder.train()

    gen = torch.Generator().manual_seed(p2.seed)
    hold_x, hold_w = make_pairs(mapping, g, p2.holdout_size, gen, p2.filter, p2.luma)
    initial = evaluate_encoder(encoder, hold_x, hold_w, p2.batch_size)
    initial_eval = evaluate_encoder(encoder, hold_x, hold_w, p2.batch_size, train_mode=False)
    opt = torch.optim.Adam(encoder.parameters(), lr=p2.lr, betas=tuple(float(b) for b in p2.betas))
    csv_log = _CsvLog(out / "phase2_log.csv" if out else None, PHASE2_FIELDS)
    csv_log.write({"epoch": 0, "steps": 0, "train_loss": float("nan"), "holdout_loss": initial,
                   "holdout_loss_eval": initial_eval})
    steps = 0
    holdout = holdout_eval = initial
    try:
        for epoch in range(1, p2.epochs + 1):
            x_f, w1 = make_pairs(mapping, g, p2.pool_size, gen, p2.filter, p2.luma)
            order = torch.randperm(p2.pool_size, generator=gen)
            running, count = 0.0, 0
            # full batches only: the pool is regenerated every epoch anyway
            for start in range(0, p2.pool_size - p2.batch_size + 1, p2.batch_size):
                idx = order[start:start + p2.batch_size]
                loss = encoder_loss(encoder(x_f[idx]), w1[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                if not math.isfinite(loss.item()):
                    raise TrainingDivergedError(f"non-finite encoder loss in epoch {epoch}")
                running += loss.item()
                count += 1
                steps += 1
            holdout = evaluate_encoder(encoder, hold_x, hold_w, p2.batch_size)
            holdout_eval = evaluate_encoder(encoder, hold_x, hold_w, p2.batch_size, train_mode=False)
            row = {"epoch": epoch, "steps": steps, "train_loss": running / count, "holdout_loss": holdout,
                   "holdout_loss_eval": holdout_eval}
            csv_log.write(row)
            if on_log is not None:
                on_log(row)
    finally:
        csv_log.close()

    encoder.eval()
    for m in frozen:
        if any(p.grad is not None and bool(p.grad.ne(0).any()) for p in m.parameters()):
            raise InvalidStateError("a frozen first-phase parameter accumulated a gradient")
    if state_digest(frozen) != before:
        raise InvalidStateError("first-phase parameters changed during encoder training")
    extra = {"initial_loss": initial, "final_loss": holdout, "initial_loss_eval": initial_eval,
             "final_loss_eval": holdout_eval, "encoder_steps": steps}
    result = Checkpoint(cfg, nets, "phase2", ckpt.step, gen.get_state(), ckpt.ema_steps, extra)
    if out is not None:
        save_checkpoint(result, out / "phase2.ckpt")
    return result
