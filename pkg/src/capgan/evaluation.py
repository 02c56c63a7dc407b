"""Checkpoint evaluation: distribution metrics against a real set and the guided content-match test."""

from dataclasses import dataclass
from typing import List, Optional

import torch

from . import data as datamod
from .checkpoint import Checkpoint
from .data import ImageDataset, extract_attributes_oracle
from .metrics import (MetricReport, PixelPCAExtractor, above_chance_test, attribute_match_rate, fid, knn_precision,
                      make_extractor)
from .models import ModelBundle
from .sampling import guided_images, sample_images

# guides are drawn from a record stream disjoint from any training seed
GUIDE_SEED_OFFSET = 1_000_003


@dataclass
class RealReference:
    images: torch.Tensor
    extractor: PixelPCAExtractor

    @classmethod
    def build(cls, dataset: ImageDataset, n_real: int, extractor_id: str) -> "RealReference":
        images = dataset.images[:n_real]
        return cls(images, make_extractor(extractor_id).fit(images))

    def features(self):
        return self.extractor.embed(self.images)


def distribution_metrics(reference: RealReference, fake_images: torch.Tensor, k: int):
    real = reference.features()
    fake = reference.extractor.embed(fake_images)
    return fid(real, fake), knn_precision(real, fake, k)


def generator_metrics(nets: ModelBundle, reference: RealReference, n_fake: int, k: int, seed: int,
                      psi: float = 1.0, use_ema: bool = True):
    return distribution_metrics(reference, sample_images(nets, n_fake, seed, psi, use_ema), k)


def guide_set(cfg, n: int, seed: int):
    """n freshly rendered synthetic guides with their ground-truth records."""
    base = cfg.data.seed + GUIDE_SEED_OFFSET + int(seed)
    ds = datamod.synthetic_dataset(n, base, cfg.synthesis.image_size)
    return ds.images, ds.attributes


def content_match(nets: ModelBundle, cfg, n_pairs: int, seed: int, psi: float = 1.0):
    """Render one guided output per guide, extract attributes from both, and test
    shape agreement against the 1/3 chance level.

    Returns (match_rates, binomial test dict, guide images, output images, output records).
    """
    guides, guide_attrs = guide_set(cfg, n_pairs, seed)
    outputs = guided_images(nets, guides, cfg, count=1, seed=seed, psi=psi)[:, 0]
    out_attrs: List[Optional[datamod.AttributeRecord]] = [
        extract_attributes_oracle(img) for img in datamod.to_unit_range(outputs)]
    rates = attribute_match_rate(guide_attrs, out_attrs)
    matches = sum(o is not None and o.shape_class == g.shape_class for g, o in zip(guide_attrs, out_attrs))
    test = above_chance_test(matches, n_pairs)
    test["extraction_failures"] = sum(o is None for o in out_attrs)
    return rates, test, guides, outputs, out_attrs


def evaluate_checkpoint(ckpt: Checkpoint, dataset: ImageDataset, seed: int, psi: Optional[float] = None,
                        reference: Optional[RealReference] = None) -> MetricReport:
    cfg = ckpt.config
    m = cfg.metrics
    psi = m.psi if psi is None else psi
    reference = reference or RealReference.build(dataset, m.n_real, m.extractor)
    fid_ema, prec_ema = generator_metrics(ckpt.nets, reference, m.n_fake, m.k, seed, psi, use_ema=True)
    fid_live, prec_live = generator_metrics(ckpt.nets, reference, m.n_fake, m.k, seed, psi, use_ema=False)
    report = MetricReport(extractor=reference.extractor.extractor_id, n_real=len(reference.images),
                          n_fake=m.n_fake, fid=fid_ema, precision=prec_ema, k=m.k,
                          config_hash=cfg.config_hash(),
                          extra={"phase": ckpt.phase, "step": ckpt.step, "psi": psi, "seed": seed,
                                 "fid_live": fid_live, "precision_live": prec_live})
    if ckpt.nets.has_encoder:
        rates, test, *_ = content_match(ckpt.nets, cfg, m.content_pairs, seed, psi)
        report.match_rates = rates
        report.content_test = test
        for key in ("initial_loss", "final_loss", "final_loss_eval"):
            if key in ckpt.extra:
                report.extra[f"encoder_{key}"] = ckpt.extra[key]
    return report
