"""MSE / fMSE / PSNR on the 0-255 scale, dataset evaluation and weight-map export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .imageio import write_mask_png
from .network import DucoNetConfig, code_sources, downsample_mask, duconet_forward, duconet_forward_full, make_batch

PSNR_CAP = 100.0
METRIC_COLUMNS = ("id", "mse", "fmse", "psnr", "fg_fraction")


class EmptyForegroundError(ValueError):
    pass


@dataclass(frozen=True)
class ImageMetrics:
    mse: float
    fmse: float
    psnr: float
    foreground_fraction: float


def psnr_from_mse(mse: float) -> float:
    if mse < 255.0**2 * 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def image_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> ImageMetrics:
    """Metrics for (H, W, 3) images in [0, 1]; fMSE counts pixels with mask > 0.5."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    fg = np.asarray(mask, dtype=np.float64).reshape(pred.shape[:2]) > 0.5
    if not fg.any():
        raise EmptyForegroundError("fMSE is undefined for an empty foreground")
    sq = ((pred - gt) * 255.0) ** 2
    mse = float(sq.mean())
    fmse = float(sq[fg].mean())
    return ImageMetrics(mse, fmse, psnr_from_mse(mse), float(fg.mean()))


def aggregate(rows: Iterable[ImageMetrics]) -> ImageMetrics:
    """Per-image means of every field."""
    rows = list(rows)
    return ImageMetrics(
        float(np.mean([r.mse for r in rows])),
        float(np.mean([r.fmse for r in rows])),
        float(np.mean([r.psnr for r in rows])),
        float(np.mean([r.foreground_fraction for r in rows])),
    )


def predict(samples, params, config: DucoNetConfig, batch_size: int = 16) -> list[np.ndarray]:
    """Harmonize every sample's composite; returns (H, W, 3) arrays."""
    out = []
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = make_batch([s.composite for s in chunk], [s.mask for s in chunk])
            pred = duconet_forward(batch, params, config).data
            out.extend(p.transpose(1, 2, 0).copy() for p in pred)
    return out


@dataclass
class EvaluationReport:
    rows: list[tuple[str, ImageMetrics]]
    mean: ImageMetrics
    composite: ImageMetrics

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for sid, m in self.rows:
                w.writerow(_row(sid, m))
            w.writerow(_row("mean", self.mean))
            w.writerow(_row("composite", self.composite))


def _row(sid: str, m: ImageMetrics) -> list:
    return [sid, repr(m.mse), repr(m.fmse), repr(m.psnr), repr(m.foreground_fraction)]


def evaluate_samples(samples: Sequence, params, config: DucoNetConfig) -> EvaluationReport:
    """Model metrics per image, their mean, and the identity (composite) baseline mean."""
    samples = list(samples)
    preds = predict(samples, params, config)
    rows = [(s.id, image_metrics(p, s.gt, s.mask)) for s, p in zip(samples, preds)]
    baseline = [image_metrics(s.composite, s.gt, s.mask) for s in samples]
    return EvaluationReport(rows, aggregate(m for _, m in rows), aggregate(baseline))


def export_weight_maps(composite: np.ndarray, mask: np.ndarray, params, config: DucoNetConfig, out_dir) -> list[Path]:
    """Write each decoder stage's per-channel fusion weights as grayscale PNGs.

    Background pixels (downsampled mask <= 0.5) are set to black.  Files are
    named ``stage{t}_{channel}.png`` with t counting decoder stages from 1.
    """
    if not code_sources(config.ablation_mode) or config.ablation_mode.value != "CMPix":
        raise ValueError(f"weight maps exist only for CMPix models, not {config.ablation_mode.value}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ad.no_grad():
        result = duconet_forward_full(make_batch([composite], [mask]), params, config)
    written = []
    for t, maps in enumerate(result.weight_maps, start=1):
        for src, a in zip(code_sources(config.ablation_mode), maps):
            values = a.data[0, 0]
            fg = downsample_mask(mask, *values.shape)[0, 0] > 0.5
            path = out_dir / f"stage{t}_{src}.png"
            write_mask_png(path, np.where(fg, values, 0.0))
            written.append(path)
    return written


def read_metrics_csv(path) -> dict[str, Mapping[str, float]]:
    with open(path, newline="") as fh:
        return {
            row["id"]: {k: float(row[k]) for k in METRIC_COLUMNS[1:]}
            for row in csv.DictReader(fh)
        }
