"""The set of networks that make up one run, built deterministically from a config."""

import contextlib
import copy
from typing import Iterator, Optional

import torch
import torch.nn as nn

from .content_encoder import FrequencyEncoder
from .synthesis import Discriminator, Generator, MappingNetwork, RunningStyleMean


@contextlib.contextmanager
def seeded_init(seed: int):
    """Build modules under a fixed seed without disturbing the global RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


class ModelBundle(nn.Module):
    """Mapping ``map``, synthesis ``g``, discriminator ``d``, their averaged copies
    ``map_ema`` / ``g_ema``, the running style mean ``w_avg`` and, once the
    second phase has run, the frequency encoder ``e``.

    State-dict keys (``g.block8.conv0.weight``, ``e.em1.cmb.bn0.running_mean`` ...)
    are the parameter names stored in checkpoints.
    """

    def __init__(self, cfg, seed: Optional[int] = None, with_encoder: bool = False,
                 encoder_depths=None):
        super().__init__()
        s = cfg.synthesis
        seed = cfg.phase1.seed if seed is None else seed
        with seeded_init(seed):
            self.map = MappingNetwork(s.d_z, s.d_style, s.mapping_depth)
            self.g = Generator(s)
            self.d = Discriminator(s)
        self.map_ema = copy.deepcopy(self.map)
        self.g_ema = copy.deepcopy(self.g)
        self.w_avg = RunningStyleMean(s.d_style, cfg.phase1.w_avg_decay)
        self.e = None
        if with_encoder:
            self.attach_encoder(cfg, cfg.phase2.seed, encoder_depths)

    def attach_encoder(self, cfg, seed: int, depths=None) -> FrequencyEncoder:
        with seeded_init(seed):
            self.e = FrequencyEncoder(cfg.encoder_config(depths))
        return self.e

    @property
    def has_encoder(self) -> bool:
        return self.e is not None

    def phase1_modules(self) -> Iterator[nn.Module]:
        """Everything the second phase must leave untouched."""
        return iter((self.map, self.g, self.d, self.map_ema, self.g_ema, self.w_avg))

    def style_source(self, use_ema: bool = True):
        return (self.map_ema, self.g_ema) if use_ema else (self.map, self.g)
