"""End-to-end run: dataset, both training phases, early-vs-final distribution metrics
and the guided content-match test, summarized in ``experiment.json``.

Stages whose checkpoint already exists under the run directory with the same
config hash are loaded instead of retrained, so an interrupted run resumes at
stage granularity.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import torch

from .checkpoint import load_checkpoint, read_manifest
from .config import RunConfig
from .data import image_grid, load_dataset, save_png, to_unit_range
from .errors import ConfigError
from .evaluation import RealReference, content_match, generator_metrics
from .metrics import MetricReport
from .training import train_phase1, train_phase2

log = logging.getLogger(__name__)


def _reusable(path: Path, cfg: RunConfig) -> bool:
    return path.is_file() and read_manifest(path).get("config_hash") == cfg.config_hash()


def run_experiment(cfg: RunConfig, out_dir, eval_seed: Optional[int] = None) -> dict:
    if not cfg.phase1.snapshot_steps:
        raise ConfigError("the experiment compares against an early snapshot; set phase1.snapshot_steps")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    seed = cfg.seed if eval_seed is None else eval_seed
    dataset = load_dataset(cfg.data)

    p1_path = out / "phase1.ckpt"
    if _reusable(p1_path, cfg):
        log.info("reusing %s", p1_path)
        phase1 = load_checkpoint(p1_path)
    else:
        phase1 = train_phase1(cfg, dataset, out)
    early_step = min(cfg.phase1.snapshot_steps)
    early = load_checkpoint(out / f"snapshot_{early_step:06d}.ckpt")

    p2_path = out / "phase2.ckpt"
    if _reusable(p2_path, cfg):
        log.info("reusing %s", p2_path)
        phase2 = load_checkpoint(p2_path)
    else:
        phase2 = train_phase2(phase1, out_dir=out)

    m = cfg.metrics
    reference = RealReference.build(dataset, m.n_real, m.extractor)
    scores = {}
    for name, ck in (("early", early), ("final", phase1)):
        for use_ema in (False, True):
            f, p = generator_metrics(ck.nets, reference, m.n_fake, m.k, seed, m.psi, use_ema)
            tag = f"{name}_{'ema' if use_ema else 'live'}"
            scores[f"fid_{tag}"] = f
            scores[f"precision_{tag}"] = p

    rates, test, guides, outputs, _ = content_match(phase2.nets, cfg, m.content_pairs, seed, m.psi)
    pairs = to_unit_range(torch.stack([guides[:8], outputs[:8]], dim=1).flatten(0, 1))
    save_png(out / "guided_pairs.png", image_grid(pairs, 2))

    report = MetricReport(extractor=reference.extractor.extractor_id, n_real=len(reference.images), n_fake=m.n_fake,
                          fid=scores["fid_final_ema"], precision=scores["precision_final_ema"], k=m.k,
                          match_rates=rates, content_test=test, config_hash=cfg.config_hash(),
                          extra={**scores, "early_step": early.step, "final_step": phase1.step,
                                 "encoder_initial_loss": phase2.extra["initial_loss"],
                                 "encoder_final_loss": phase2.extra["final_loss"],
                                 "encoder_final_loss_eval": phase2.extra["final_loss_eval"]})
    (out / "report.txt").write_text(report.to_text())
    with open(out / "report.csv", "w") as fh:
        fh.write(",".join(report.csv_header()) + "\n" + ",".join(report.csv_row()) + "\n")

    summary = {
        "config_hash": cfg.config_hash(),
        "early_step": early.step,
        "final_step": phase1.step,
        **scores,
        "fid_ratio_live": scores["fid_final_live"] / scores["fid_early_live"],
        "fid_ratio_ema": scores["fid_final_ema"] / scores["fid_early_ema"],
        "encoder_initial_loss": phase2.extra["initial_loss"],
        "encoder_final_loss": phase2.extra["final_loss"],
        "encoder_loss_ratio": phase2.extra["final_loss"] / phase2.extra["initial_loss"],
        "encoder_final_loss_eval": phase2.extra["final_loss_eval"],
        "content_match": rates,
        "content_test": test,
    }
    (out / "experiment.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
