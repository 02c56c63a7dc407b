"""Command-line entry point: ``capgan <verb> ...``.

Every verb takes ``--seed`` and ``--out``; config-driven verbs also take
``--config file.json`` / ``--preset`` and repeated ``--set key.path=value``.
Errors print as ``error [<category>]: <message>`` with a per-category exit code.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import data as datamod
from . import freqsel
from .checkpoint import load_checkpoint
from .config import RunConfig
from .errors import CapganError, InvalidInputError
from .evaluation import evaluate_checkpoint
from .experiment import run_experiment
from .sampling import guided_images, sample_images
from .sweeps import sweep_emblocks, sweep_frequency, sweep_truncation
from .training import train_phase1, train_phase2

log = logging.getLogger("capgan")

PRESETS = {"default": RunConfig, "desk": RunConfig.desk, "toy": RunConfig.toy}


def _float_list(text: str) -> List[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> List[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else PRESETS[args.preset]()
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}", f"phase1.seed={args.seed + 1}", f"phase2.seed={args.seed + 2}"])
    return cfg.with_overrides(args.set or [])


def _ckpt_config_overrides(ckpt, args):
    return ckpt.config.with_overrides(args.set) if args.set else ckpt.config


def _seed(args, cfg) -> int:
    return cfg.seed if args.seed is None else args.seed


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# verbs


def cmd_synth_data(args) -> None:
    cfg = _config(args)
    d = cfg.data
    count = args.count if args.count is not None else d.count
    datamod.write_synthetic_dataset(args.out, count, d.seed, d.image_size)
    print(f"wrote {count} images and attributes.csv to {args.out}")


def cmd_train_phase1(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    dataset = datamod.load_dataset(cfg.data)
    ck = train_phase1(cfg, dataset, out, on_log=lambda row: log.info("%s", row))
    print(f"phase1 finished at step {ck.step}: {out / 'phase1.ckpt'}")


def cmd_train_phase2(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    cfg = _ckpt_config_overrides(ckpt, args)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"phase2.seed={args.seed}"])
    out = Path(args.out)
    ck = train_phase2(ckpt, cfg, out, on_log=lambda row: log.info("%s", row))
    print(f"phase2 finished: loss {ck.extra['initial_loss']:.4g} -> {ck.extra['final_loss']:.4g}; "
          f"{out / 'phase2.ckpt'}")


def cmd_generate(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    ckpt.require_phase("phase1", "phase2")
    cfg = ckpt.config
    seed = _seed(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.guide:
        guide = datamod.load_image(args.guide, cfg.synthesis.image_size)
        guide_t = datamod.to_model_range(guide[None])
        imgs = guided_images(ckpt.nets, guide_t, cfg, args.count, seed, args.psi)[0]
        row = np.concatenate([guide[None], datamod.to_unit_range(imgs)])
        datamod.save_png(out / "grid.png", datamod.image_grid(row, len(row)))
        datamod.save_png(out / "guide.png", guide)
    else:
        imgs = sample_images(ckpt.nets, args.count, seed, args.psi)
        cols = min(args.count, 8)
        datamod.save_png(out / "grid.png", datamod.image_grid(datamod.to_unit_range(imgs), cols))
    for i, img in enumerate(datamod.to_unit_range(imgs)):
        datamod.save_png(out / f"sample_{i:04d}.png", img)
    print(f"wrote {len(imgs)} images to {out}")


def cmd_freq_analyze(args) -> None:
    img = datamod.load_image(args.image, args.size) if args.size else _load_native(args.image)
    spec = freqsel.FilterSpec(args.mode, args.cutoff, args.combiner)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    small = freqsel.downsample_half(freqsel.to_intensity(img))
    centered = freqsel.shift_center(freqsel.dft2(small))
    filtered = freqsel.band_filter(centered, spec)
    refined = freqsel.frequency_refine(img, spec)
    datamod.save_png(out / "intensity.png", np.repeat(small[..., None], 3, -1))
    datamod.save_png(out / "spectrum.png", np.repeat(freqsel.magnitude_image(centered)[..., None], 3, -1) / 255.0)
    datamod.save_png(out / "spectrum_filtered.png",
                     np.repeat(freqsel.magnitude_image(filtered)[..., None], 3, -1) / 255.0)
    datamod.save_png(out / "mask.png", np.repeat(freqsel.band_mask(small.shape, spec)[..., None], 3, -1) * 1.0)
    datamod.save_png(out / "refined.png", np.repeat(np.clip(refined, 0, 1)[..., None], 3, -1))
    energy_in = float((small ** 2).sum())
    energy_out = float((refined ** 2).sum())
    _write_json(out / "analysis.json", {"filter": spec.label, "shape": list(small.shape),
                                        "energy_in": energy_in, "energy_out": energy_out,
                                        "retained_fraction": energy_out / energy_in if energy_in else 0.0})
    print(f"wrote spectrum, mask and refined image ({spec.label}) to {out}")


def _load_native(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def cmd_evaluate(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    ckpt.require_phase("phase1", "phase2")
    cfg = ckpt.config
    seed = _seed(args, cfg)
    report = evaluate_checkpoint(ckpt, datamod.load_dataset(cfg.data), seed, args.psi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    with open(out / "report.csv", "w") as fh:
        fh.write(",".join(report.csv_header()) + "\n" + ",".join(report.csv_row()) + "\n")
    print(report.to_text(), end="")


def cmd_sweep(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    seed = _seed(args, cfg)
    dataset = datamod.load_dataset(cfg.data)
    if args.kind == "trunc":
        rows = sweep_truncation(ckpt, dataset, _float_list(args.psis), seed, args.out)
    elif args.kind == "freq":
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        rows = sweep_frequency(ckpt, dataset, _int_list(args.cutoffs), modes, seed, args.out, args.combiner,
                               args.workers, args.ckpt)
    else:
        rows = sweep_emblocks(ckpt, dataset, _int_list(args.counts), seed, args.out, args.workers, args.ckpt)
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_experiment(args) -> None:
    cfg = _config(args)
    summary = run_experiment(cfg, args.out, args.eval_seed)
    print(json.dumps(summary, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p) -> None:
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="default", help="built-in config when --config is absent")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. phase1.lr=0.001")


def _add_common(p, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, help="seed for this command (defaults to the config seed)")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth-data", help="render the synthetic shapes dataset to PNG + attributes.csv")
    _add_config_flags(p)
    _add_common(p)
    p.add_argument("--count", type=int, help="number of images (default: data.count)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-phase1", help="adversarial training of mapping + generator")
    _add_config_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_phase1)

    p = sub.add_parser("train-phase2", help="train the frequency encoder on a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override phase2/encoder settings")
    _add_common(p)
    p.set_defaults(func=cmd_train_phase2)

    p = sub.add_parser("generate", help="sample images, optionally guided by an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--guide", help="guide image (needs a phase2 checkpoint)")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--psi", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("freq", help="frequency-domain tools")
    fsub = p.add_subparsers(dest="freq_verb", required=True)
    a = fsub.add_parser("analyze", help="write spectrum, mask and refined image for one picture")
    a.add_argument("--image", required=True)
    a.add_argument("--mode", choices=freqsel.FILTER_MODES, default="low")
    a.add_argument("--cutoff", type=int, default=5)
    a.add_argument("--combiner", choices=freqsel.COMBINERS, default="and")
    a.add_argument("--size", type=int, help="centre-crop and resize to this many pixels first")
    _add_common(a)
    a.set_defaults(func=cmd_freq_analyze)

    p = sub.add_parser("evaluate", help="FID / precision / content match for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--psi", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="parameter sweeps written as CSV + plot")
    ssub = p.add_subparsers(dest="kind", required=True)
    sweep_freq = ssub.add_parser("freq", help="one encoder per band filter, plus an unfiltered baseline")
    sweep_freq.add_argument("--cutoffs", required=True, help="comma-separated cutoffs")
    sweep_freq.add_argument("--modes", default="low,high")
    sweep_freq.add_argument("--combiner", choices=freqsel.COMBINERS, default="and")
    sweep_trunc = ssub.add_parser("trunc", help="truncation psi grid")
    sweep_trunc.add_argument("--psis", default="0,0.25,0.5,0.75,1")
    sweep_blocks = ssub.add_parser("emblocks", help="one encoder per number of encoder modules")
    sweep_blocks.add_argument("--counts", required=True, help="comma-separated numbers of encoder modules")
    for sp in (sweep_freq, sweep_trunc, sweep_blocks):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--workers", type=int, default=1, help="parallel processes for retraining sweeps")
        _add_common(sp)
        sp.set_defaults(func=cmd_sweep)

    p = sub.add_parser("experiment", help="full pipeline with early/final metrics and the content test")
    _add_config_flags(p)
    _add_common(p)
    p.add_argument("--eval-seed", type=int)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        args.func(args)
    except CapganError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error [{InvalidInputError.category}]: {exc}", file=sys.stderr)
        return InvalidInputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
