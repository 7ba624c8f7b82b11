"""Command-line entry point: ``duconet <command> [flags]``."""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .colorspace import channel_change_stats, channel_correlation, rgb_to_lab
from .config import RunConfig, load_run_config
from .imageio import read_mask_png, read_rgb_png, write_rgb_png
from .metrics import evaluate_samples, export_weight_maps
from .network import AblationMode, harmonize, load_checkpoint
from .ranking import bt_fit, read_pairs_csv
from .synth import generate_dataset, read_dataset, write_dataset
from .training import train

log = logging.getLogger("duconet")


class CommandError(RuntimeError):
    pass


class _Outputs:
    """Paths created by a command; removed again if the command fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        return path

    def cleanup(self):
        for p in reversed(self.paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _split_dirs(data: Path, cfg: RunConfig):
    if (data / "train").is_dir() and (data / "test").is_dir():
        return read_dataset(data / "train"), read_dataset(data / "test")
    samples = read_dataset(data)
    n_test = cfg.data.n_test
    if not 0 < n_test < len(samples):
        raise CommandError(f"cannot hold out {n_test} test samples from {len(samples)}")
    return samples[:-n_test], samples[-n_test:]


def cmd_synth(args, out: _Outputs) -> None:
    cfg = load_run_config(args.config)
    n = args.n if args.n is not None else cfg.data.n_train + cfg.data.n_test
    size = cfg.data.size
    out.add(args.out)
    samples = generate_dataset(n, size, cfg.data.perturb)
    write_dataset(samples, args.out, size=size, spec=cfg.data.perturb)
    log.info("wrote %d samples to %s", n, args.out)


def cmd_train(args, out: _Outputs) -> None:
    cfg = load_run_config(args.config)
    model_cfg = cfg.model if args.ablation is None else cfg.model.replace(ablation_mode=AblationMode(args.ablation))
    samples = read_dataset(args.data)
    size = samples[0].gt.shape[0]
    if size != model_cfg.input_size:
        raise CommandError(f"dataset images are {size}px but the model expects {model_cfg.input_size}px")
    ckpt = out.add(args.out)
    loss_csv = out.add(args.loss_csv or ckpt.with_suffix(".loss.csv"))
    for e in cfg.train.decay_epochs:
        out.add(ckpt.with_name(f"{ckpt.stem}.epoch{e:04d}{ckpt.suffix}"))
    result = train(samples, model_cfg, cfg.train, checkpoint_path=ckpt, loss_csv=loss_csv)
    log.info("final mean L1 %.6f", result.losses[-1])


def _read_pair(comp, mask, size):
    image = read_rgb_png(comp)
    m = read_mask_png(mask)
    if image.shape[:2] != (size, size) or m.shape != (size, size):
        raise CommandError(f"inputs are {image.shape[:2]} / {m.shape}; model expects {size}x{size}")
    return image, m


def cmd_harmonize(args, out: _Outputs) -> None:
    config, params = load_checkpoint(args.ckpt)
    image, mask = _read_pair(args.comp, args.mask, config.input_size)
    write_rgb_png(out.add(args.out), harmonize(image, mask, params, config))


def cmd_evaluate(args, out: _Outputs) -> None:
    config, params = load_checkpoint(args.ckpt)
    report = evaluate_samples(read_dataset(args.data), params, config)
    report.write_csv(out.add(args.out))
    m, c = report.mean, report.composite
    print(f"model     mse {m.mse:.3f}  fmse {m.fmse:.3f}  psnr {m.psnr:.3f}")
    print(f"composite mse {c.mse:.3f}  fmse {c.fmse:.3f}  psnr {c.psnr:.3f}")


def cmd_ablation_table(args, out: _Outputs) -> None:
    cfg = load_run_config(args.config)
    train_set, test_set = _split_dirs(Path(args.data), cfg)
    modes = [AblationMode(m) for m in args.modes] if args.modes else list(AblationMode)
    table = out.add(args.out)
    rows = []
    composite = None
    for mode in modes:
        log.info("training %s", mode.value)
        model_cfg = cfg.model.replace(ablation_mode=mode)
        result = train(train_set, model_cfg, cfg.train)
        report = evaluate_samples(test_set, result.params, model_cfg)
        composite = report.composite
        rows.append((mode.value, report.mean))
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "mse", "fmse", "psnr"])
        w.writerow(["composite", repr(composite.mse), repr(composite.fmse), repr(composite.psnr)])
        for name, m in rows:
            w.writerow([name, repr(m.mse), repr(m.fmse), repr(m.psnr)])


def cmd_correlation(args, out: _Outputs) -> None:
    paths = sorted(glob.glob(args.images, recursive=True))
    if not paths:
        raise CommandError(f"no images match {args.images!r}")
    report = channel_correlation([read_rgb_png(p) for p in paths], args.n, args.seed)
    out.add(args.out).write_text(report.to_json())


def cmd_channel_stats(args, out: _Outputs) -> None:
    samples = read_dataset(args.data)
    per_image = np.array(
        [channel_change_stats(rgb_to_lab(s.composite), rgb_to_lab(s.gt), s.mask) for s in samples]
    )
    mean = per_image.mean(axis=0)
    doc = {
        "n_images": len(samples),
        "mean_abs_delta_L": float(mean[0]),
        "mean_abs_delta_a": float(mean[1]),
        "mean_abs_delta_b": float(mean[2]),
    }
    out.add(args.out).write_text(json.dumps(doc, indent=2))
    print(f"mean |dL| {mean[0]:.2f}  |da| {mean[1]:.2f}  |db| {mean[2]:.2f}")


def cmd_weight_maps(args, out: _Outputs) -> None:
    config, params = load_checkpoint(args.ckpt)
    image, mask = _read_pair(args.comp, args.mask, config.input_size)
    out.add(args.out)
    export_weight_maps(image, mask, params, config, args.out)


def cmd_bt_rank(args, out: _Outputs) -> None:
    result = bt_fit(read_pairs_csv(args.pairs))
    out.add(args.out).write_text(result.to_json())
    for item, score in sorted(result.scores.items(), key=lambda kv: -kv[1]):
        print(f"{item}\t{score:+.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duconet", description="Dual colour space image harmonization toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="run config JSON (data section is used)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, help="number of samples (default n_train + n_test)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path (.dhck)")
    p.add_argument("--ablation", choices=[m.value for m in AblationMode], help="override model.ablation_mode")
    p.add_argument("--loss-csv", help="loss curve CSV (default <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("harmonize", help="harmonize one composite image")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--comp", required=True, help="composite RGB PNG")
    p.add_argument("--mask", required=True, help="foreground mask PNG")
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("evaluate", help="per-image and mean MSE / fMSE / PSNR")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablation-table", help="train and evaluate every ablation mode")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", required=True, help="dataset directory (with train/ and test/, or split by data.n_test)")
    p.add_argument("--out", required=True, help="table CSV")
    p.add_argument("--modes", nargs="+", choices=[m.value for m in AblationMode], help="subset of modes")
    p.set_defaults(func=cmd_ablation_table)

    p = sub.add_parser("correlation", help="RGB vs Lab channel correlation report")
    p.add_argument("--images", required=True, help="glob of RGB PNGs")
    p.add_argument("--n", type=int, default=1000, help="pixels to sample")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", required=True, help="report JSON")
    p.set_defaults(func=cmd_correlation)

    p = sub.add_parser("channel-stats", help="mean foreground |dL|, |da|, |db| between composite and ground truth")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="stats JSON")
    p.set_defaults(func=cmd_channel_stats)

    p = sub.add_parser("weight-maps", help="export fusion weight maps as PNGs")
    p.add_argument("--ckpt", required=True, help="checkpoint path (CMPix model)")
    p.add_argument("--comp", required=True, help="composite RGB PNG")
    p.add_argument("--mask", required=True, help="foreground mask PNG")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_weight_maps)

    p = sub.add_parser("bt-rank", help="Bradley-Terry scores from winner,loser pairs")
    p.add_argument("--pairs", required=True, help="CSV of winner_id,loser_id rows")
    p.add_argument("--out", required=True, help="scores JSON")
    p.set_defaults(func=cmd_bt_rank)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    outputs = _Outputs()
    try:
        args.func(args, outputs)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        outputs.cleanup()
        print(f"duconet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
