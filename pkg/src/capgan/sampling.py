"""Image sampling from trained networks: plain truncated sampling and content-guided generation."""

from typing import Optional

import torch

from .errors import InvalidCheckpointError, InvalidInputError
from .freqsel import refine_batch
from .models import ModelBundle
from .synthesis import truncate

CHUNK = 64


def _check_psi(psi: float) -> None:
    if not 0.0 <= psi <= 1.0:
        raise InvalidInputError(f"psi must lie in [0, 1], got {psi}")


@torch.no_grad()
def sample_images(nets: ModelBundle, n: int, seed: int, psi: float = 1.0, use_ema: bool = True,
                  noise_mode: str = "const") -> torch.Tensor:
    """n images in [-1, 1] from latents drawn with ``seed``; styles pulled toward the running mean by psi."""
    _check_psi(psi)
    mapping, g = nets.style_source(use_ema)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(n, g.cfg.d_z, generator=gen)
    out = []
    for start in range(0, n, CHUNK):
        w = truncate(mapping(z[start:start + CHUNK]), nets.w_avg.w_avg, psi)
        out.append(g(g.broadcast(w), noise_mode=noise_mode, generator=gen))
    return torch.cat(out)


@torch.no_grad()
def content_vectors(nets: ModelBundle, guides: torch.Tensor, cfg) -> torch.Tensor:
    """Content vectors q for guide images (N, 3, H, W) in [-1, 1], encoder in inference mode."""
    if not nets.has_encoder:
        raise InvalidCheckpointError("guided generation needs a checkpoint with a trained encoder (phase2)")
    size = nets.g.cfg.image_size
    if guides.ndim != 4 or tuple(guides.shape[1:]) != (3, size, size):
        raise InvalidInputError(f"guide images must be (N, 3, {size}, {size}), got {tuple(guides.shape)}")
    was_training = nets.e.training
    nets.e.eval()
    try:
        qs = [nets.e(refine_batch(guides[s:s + CHUNK], cfg.phase2.filter, cfg.phase2.luma))
              for s in range(0, len(guides), CHUNK)]
    finally:
        nets.e.train(was_training)
    return torch.cat(qs)


@torch.no_grad()
def guided_images(nets: ModelBundle, guides: torch.Tensor, cfg, count: int, seed: int, psi: float = 1.0,
                  use_ema: bool = True, noise_mode: str = "const", q: Optional[torch.Tensor] = None):
    """For every guide, ``count`` images whose coarse sites all receive the guide's
    content vector and whose fine sites receive fresh (truncated) styles.

    Returns (N, count, 3, H, W) in [-1, 1].
    """
    _check_psi(psi)
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    q = content_vectors(nets, guides, cfg) if q is None else q
    mapping, g = nets.style_source(use_ema)
    gen = torch.Generator().manual_seed(int(seed))
    n = len(q)
    z2 = torch.randn(n * count, g.cfg.d_z, generator=gen)
    q_rep = q.repeat_interleave(count, dim=0)
    out = []
    for start in range(0, n * count, CHUNK):
        w2 = truncate(mapping(z2[start:start + CHUNK]), nets.w_avg.w_avg, psi)
        out.append(g(g.mix(q_rep[start:start + CHUNK], w2), noise_mode=noise_mode, generator=gen))
    imgs = torch.cat(out)
    return imgs.reshape(n, count, *imgs.shape[1:])

