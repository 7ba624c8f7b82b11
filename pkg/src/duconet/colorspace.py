"""sRGB <-> CIELAB conversion (D65, 2 degree observer) and channel statistics.

Images are plain float64 arrays of shape (H, W, 3); masks are (H, W).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

WHITE_D65 = np.array([0.95047, 1.0, 1.08883])

_PRIMARIES_XY = np.array([[0.64, 0.33], [0.30, 0.60], [0.15, 0.06]])

DELTA = 6.0 / 29.0
AB_LIMIT = 128.0


class ColorRangeError(ValueError):
    pass


def _rgb_to_xyz_matrix(white: np.ndarray) -> np.ndarray:
    # Columns are the primaries' XYZ, scaled so that RGB (1,1,1) lands exactly on `white`.
    x, y = _PRIMARIES_XY[:, 0], _PRIMARIES_XY[:, 1]
    prim = np.stack([x / y, np.ones(3), (1.0 - x - y) / y])
    scale = np.linalg.solve(prim, white)
    return prim * scale


RGB_TO_XYZ = _rgb_to_xyz_matrix(WHITE_D65)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(
        c <= 0.0031308,
        c * 12.92,
        1.055 * np.maximum(c, 0.0031308) ** (1.0 / 2.4) - 0.055,
    )


def _f(t):
    return np.where(t > DELTA**3, np.cbrt(t), t / (3 * DELTA**2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > DELTA, t**3, 3 * DELTA**2 * (t - 4.0 / 29.0))


def xyz_to_lab(xyz: np.ndarray) -> np.ndarray:
    fx, fy, fz = (_f(xyz[..., i] / WHITE_D65[i]) for i in range(3))
    lab = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    lab[..., 1:] = np.clip(lab[..., 1:], -AB_LIMIT, AB_LIMIT)
    return lab


def lab_to_xyz(lab: np.ndarray) -> np.ndarray:
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    return np.stack([WHITE_D65[i] * _f_inv(f) for i, f in enumerate((fx, fy, fz))], axis=-1)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert sRGB values in [0, 1] (any leading shape, trailing 3) to CIELAB."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {rgb.shape}")
    if rgb.size and (rgb.min() < 0.0 or rgb.max() > 1.0 or not np.isfinite(rgb).all()):
        raise ColorRangeError(f"RGB components must lie in [0, 1]; got range [{rgb.min()}, {rgb.max()}]")
    xyz = srgb_to_linear(rgb) @ RGB_TO_XYZ.T
    return xyz_to_lab(xyz)


def lab_to_rgb(lab: np.ndarray, *, with_clamp_count: bool = False):
    """Inverse of :func:`rgb_to_lab`; out-of-gamut components are clamped to [0, 1].

    With ``with_clamp_count`` the number of clamped components is returned too.
    """
    lab = np.asarray(lab, dtype=np.float64)
    lin = lab_to_xyz(lab) @ XYZ_TO_RGB.T
    rgb = linear_to_srgb(lin)
    clamped = np.clip(rgb, 0.0, 1.0)
    if with_clamp_count:
        return clamped, int(np.count_nonzero(clamped != rgb))
    return clamped


def normalize_lab_channels(lab: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map L to L/100 and a, b to (v + 128)/256 so each lies in [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    return (
        lab[..., 0] / 100.0,
        (lab[..., 1] + AB_LIMIT) / (2 * AB_LIMIT),
        (lab[..., 2] + AB_LIMIT) / (2 * AB_LIMIT),
    )


def denormalize_lab_channels(norm: np.ndarray) -> np.ndarray:
    norm = np.asarray(norm, dtype=np.float64)
    return np.stack(
        [norm[..., 0] * 100.0, norm[..., 1] * 2 * AB_LIMIT - AB_LIMIT, norm[..., 2] * 2 * AB_LIMIT - AB_LIMIT],
        axis=-1,
    )


# ---------------------------------------------------------------- statistics

_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass
class CorrelationReport:
    rgb_corr: np.ndarray
    lab_corr: np.ndarray
    n_pixels: int
    rgb_undefined: list[tuple[int, int]] = field(default_factory=list)
    lab_undefined: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_pixels": self.n_pixels,
            "rgb_corr": self.rgb_corr.tolist(),
            "lab_corr": self.lab_corr.tolist(),
            "rgb_undefined": [list(p) for p in self.rgb_undefined],
            "lab_undefined": [list(p) for p in self.lab_undefined],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _pearson_matrix(samples: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    centered = samples - samples.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    flat = samples.max(axis=0) == samples.min(axis=0)
    corr = np.eye(3)
    undefined = []
    for i, j in _PAIRS:
        if flat[i] or flat[j]:
            value = 0.0
            undefined.append((i, j))
        else:
            value = float(np.clip((centered[:, i] @ centered[:, j]) / (norms[i] * norms[j]), -1.0, 1.0))
        corr[i, j] = corr[j, i] = value
    return corr, undefined


def channel_correlation(images: Sequence[np.ndarray], n_pixels: int = 1000, seed: int = 0) -> CorrelationReport:
    """Pearson correlation between channel pairs over pixels sampled from a corpus.

    Pixels are drawn uniformly with replacement from the union of all images.
    Pairs involving a zero-variance channel are set to 0 and listed as undefined.
    """
    if n_pixels < 2:
        raise ValueError("n_pixels must be at least 2")
    if not images:
        raise ValueError("channel_correlation needs at least one image")
    flat = np.concatenate([np.asarray(im, dtype=np.float64).reshape(-1, 3) for im in images])
    rng = np.random.default_rng(seed)
    picks = flat[rng.integers(0, flat.shape[0], size=n_pixels)]
    rgb_corr, rgb_undef = _pearson_matrix(picks)
    lab_corr, lab_undef = _pearson_matrix(rgb_to_lab(picks))
    return CorrelationReport(rgb_corr, lab_corr, n_pixels, rgb_undef, lab_undef)


def channel_change_stats(composite_lab: np.ndarray, gt_lab: np.ndarray, mask: np.ndarray) -> tuple[float, float, float]:
    """Mean |dL|, |da|, |db| over pixels where mask > 0.5."""
    composite_lab = np.asarray(composite_lab, dtype=np.float64)
    gt_lab = np.asarray(gt_lab, dtype=np.float64)
    if composite_lab.shape != gt_lab.shape or composite_lab.shape[:2] != np.shape(mask)[:2]:
        raise ValueError(f"shape mismatch: {composite_lab.shape}, {gt_lab.shape}, {np.shape(mask)}")
    fg = np.asarray(mask).reshape(composite_lab.shape[:2]) > 0.5
    if not fg.any():
        raise ValueError("mask has no foreground pixel (> 0.5)")
    diff = np.abs(composite_lab[fg] - gt_lab[fg]).mean(axis=0)
    return float(diff[0]), float(diff[1]), float(diff[2])
