"""Parameter sweeps over a trained checkpoint, written as CSV tables plus static plots.

* truncation: distribution metrics of plain samples for each psi
* frequency: one encoder per band filter (plus an unfiltered baseline), scored on guided outputs
* emblocks: one encoder per number of encoder modules, scored on guided outputs
"""

import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .checkpoint import Checkpoint, load_checkpoint
from .content_encoder import depth_schedule
from .data import ImageDataset, load_dataset
from .errors import InvalidInputError
from .evaluation import RealReference, content_match, distribution_metrics, generator_metrics
from .freqsel import FilterSpec
from .training import train_phase2


TRUNC_FIELDS = ("psi", "fid", "precision", "fid_normalized", "one_minus_precision", "config_hash")
FREQ_FIELDS = ("mode", "cutoff", "combiner", "fid", "fid_ratio", "precision", "shape_match", "content_match",
               "encoder_final_loss", "config_hash")
EMBLOCK_FIELDS = ("n_blocks", "depths", "param_count", "fid", "precision", "shape_match", "encoder_final_loss",
                  "config_hash")


def write_csv(path, fields: Sequence[str], rows: List[Dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(round(v, 10)) if isinstance(v, float) else v) for k, v in row.items()})


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save_figure(fig, path) -> None:
    # no software/date metadata so reruns produce identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _pyplot().close(fig)


def min_max(values: Sequence[float]) -> List[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0 for _ in values]
    return [(v - lo) / (hi - lo) for v in values]


# ---------------------------------------------------------------------------
# truncation


def sweep_truncation(ckpt: Checkpoint, dataset: ImageDataset, psis: Sequence[float], seed: int, out_dir) -> List[Dict]:
    if not psis:
        raise InvalidInputError("psi list is empty")
    for psi in psis:
        if not 0.0 <= psi <= 1.0:
            raise InvalidInputError(f"psi must lie in [0, 1], got {psi}")
    ckpt.require_phase("phase1", "phase2")
    m = ckpt.config.metrics
    reference = RealReference.build(dataset, m.n_real, m.extractor)
    rows = []
    for psi in psis:
        f, p = generator_metrics(ckpt.nets, reference, m.n_fake, m.k, seed, psi)
        rows.append({"psi": float(psi), "fid": f, "precision": p})
    for row, norm in zip(rows, min_max([r["fid"] for r in rows])):
        row.update(fid_normalized=norm, one_minus_precision=1.0 - row["precision"],
                   config_hash=ckpt.config.config_hash())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep_truncation.csv", TRUNC_FIELDS, rows)
    fig, ax = _pyplot().subplots(figsize=(5, 3.5))
    ax.plot([r["psi"] for r in rows], [r["fid_normalized"] for r in rows], "o-", label="FID (normalized)")
    ax.plot([r["psi"] for r in rows], [r["one_minus_precision"] for r in rows], "s--", label="1 - precision")
    ax.set_xlabel("psi")
    ax.legend()
    fig.tight_layout()
    _save_figure(fig, out / "sweep_truncation.png")
    return rows


# ---------------------------------------------------------------------------
# encoder variants (shared by the frequency and block-count sweeps)


def _score_variant(ckpt: Checkpoint, cfg, dataset: ImageDataset, seed: int) -> Dict:
    trained = train_phase2(ckpt, cfg)
    m = cfg.metrics
    reference = RealReference.build(dataset, m.n_real, m.extractor)
    rates, test, _, outputs, _ = content_match(trained.nets, cfg, m.n_fake, seed, m.psi)
    f, p = distribution_metrics(reference, outputs, m.k)
    content_keys = [k for k in rates if k != "mean"]
    return {"fid": f, "precision": p, "shape_match": rates["shape_class"],
            "content_match": sum(rates[k] for k in content_keys) / len(content_keys),
            "encoder_final_loss": trained.extra["final_loss"],
            "param_count": sum(p.numel() for p in trained.nets.e.parameters()),
            "config_hash": cfg.config_hash()}


def _variant_job(args):
    ckpt_path, cfg_dict, seed = args
    from .config import RunConfig

    ckpt = load_checkpoint(ckpt_path)
    cfg = RunConfig.from_dict(cfg_dict)
    return _score_variant(ckpt, cfg, load_dataset(cfg.data), seed)


def _run_variants(ckpt: Checkpoint, ckpt_path, configs, dataset, seed: int, workers: int) -> List[Dict]:
    if workers > 1 and ckpt_path is not None:
        jobs = [(str(ckpt_path), c.to_dict(), seed) for c in configs]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_variant_job, jobs))
    return [_score_variant(ckpt, c, dataset, seed) for c in configs]


def sweep_frequency(ckpt: Checkpoint, dataset: ImageDataset, cutoffs: Sequence[int], modes: Sequence[str],
                    seed: int, out_dir, combiner: str = "and", workers: int = 1,
                    ckpt_path: Optional[str] = None) -> List[Dict]:
    if not cutoffs:
        raise InvalidInputError("cutoff list is empty")
    ckpt.require_phase("phase1", "phase2")
    base = ckpt.config
    specs = [FilterSpec("none", 0, combiner)]
    specs += [FilterSpec(mode, int(b), combiner) for mode in modes if mode != "none" for b in cutoffs]
    configs = [base.with_overrides([f'phase2.filter={{"mode": "{s.mode}", "cutoff": {s.cutoff}, '
                                    f'"combiner": "{s.combiner}"}}']) for s in specs]
    results = _run_variants(ckpt, ckpt_path, configs, dataset, seed, workers)
    baseline = results[0]["fid"]
    rows = []
    for s, r in zip(specs, results):
        rows.append({"mode": s.mode, "cutoff": s.cutoff, "combiner": s.combiner, "fid": r["fid"],
                     "fid_ratio": r["fid"] / baseline if baseline > 0 else float("nan"),
                     "precision": r["precision"], "shape_match": r["shape_match"],
                     "content_match": r["content_match"], "encoder_final_loss": r["encoder_final_loss"],
                     "config_hash": r["config_hash"]})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep_frequency.csv", FREQ_FIELDS, rows)
    fig, axes = _pyplot().subplots(1, 2, figsize=(9, 3.5))
    for mode in [m for m in modes if m != "none"]:
        sel = [r for r in rows if r["mode"] == mode]
        axes[0].plot([r["cutoff"] for r in sel], [r["fid_ratio"] for r in sel], "o-", label=mode)
        axes[1].plot([r["cutoff"] for r in sel], [r["precision"] for r in sel], "o-", label=mode)
    axes[0].axhline(1.0, color="gray", lw=0.8)
    axes[1].axhline(rows[0]["precision"], color="gray", lw=0.8, label="unfiltered")
    axes[0].set_ylabel("FID / FID(unfiltered)")
    axes[1].set_ylabel("precision")
    for ax in axes:
        ax.set_xlabel("cutoff")
        ax.legend()
    fig.tight_layout()
    _save_figure(fig, out / "sweep_frequency.png")
    return rows


def sweep_emblocks(ckpt: Checkpoint, dataset: ImageDataset, counts: Sequence[int], seed: int, out_dir,
                   workers: int = 1, ckpt_path: Optional[str] = None) -> List[Dict]:
    if not counts:
        raise InvalidInputError("block-count list is empty")
    for n in counts:
        if int(n) < 1:
            raise InvalidInputError(f"number of encoder modules must be >= 1, got {n}")
    ckpt.require_phase("phase1", "phase2")
    base = ckpt.config
    schedules = [depth_schedule(int(n), base.encoder.depths) for n in counts]
    configs = [base.with_overrides([f"encoder.depths={d}"]) for d in schedules]
    results = _run_variants(ckpt, ckpt_path, configs, dataset, seed, workers)
    rows = []
    for n, d, r in zip(counts, schedules, results):
        rows.append({"n_blocks": int(n), "depths": "-".join(map(str, d)), "param_count": r["param_count"],
                     "fid": r["fid"], "precision": r["precision"], "shape_match": r["shape_match"],
                     "encoder_final_loss": r["encoder_final_loss"], "config_hash": r["config_hash"]})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep_emblocks.csv", EMBLOCK_FIELDS, rows)
    fig, ax = _pyplot().subplots(figsize=(5, 3.5))
    ax.plot([r["n_blocks"] for r in rows], [r["fid"] for r in rows], "o-", color="C0")
    ax.set_xlabel("encoder modules")
    ax.set_ylabel("FID", color="C0")
    ax2 = ax.twinx()
    ax2.plot([r["n_blocks"] for r in rows], [r["param_count"] for r in rows], "s--", color="C1")
    ax2.set_ylabel("encoder parameters", color="C1")
    fig.tight_layout()
    _save_figure(fig, out / "sweep_emblocks.png")
    return rows
