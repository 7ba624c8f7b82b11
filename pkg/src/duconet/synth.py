"""Seeded synthetic harmonization triplets: ground truth, mask, composite."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .colorspace import lab_to_rgb, rgb_to_lab
from .imageio import read_mask_png, read_rgb_png, write_mask_png, write_rgb_png

MANIFEST_VERSION = 1
FG_FRACTION_RANGE = (0.05, 0.6)


@dataclass
class PerturbSpec:
    delta_L_range: tuple[float, float] = (-35.0, 35.0)
    delta_a_range: tuple[float, float] = (-6.0, 6.0)
    delta_b_range: tuple[float, float] = (-10.0, 10.0)
    gain_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("delta_L_range", "delta_a_range", "delta_b_range", "gain_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"{name} must be a finite interval, got {(lo, hi)}")
            setattr(self, name, (lo, hi))
        if self.gain_range[0] <= 0:
            raise ValueError("gain_range must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "PerturbSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown perturb spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    @classmethod
    def fixed(cls, dL: float = 0.0, da: float = 0.0, db: float = 0.0, gain: float = 1.0, seed: int = 0):
        return cls((dL, dL), (da, da), (db, db), (gain, gain), seed)


@dataclass
class SyntheticSample:
    gt: np.ndarray
    mask: np.ndarray
    composite: np.ndarray
    deltas: dict = field(default_factory=dict)
    id: str = ""
    seed: int = 0


def generate_ground_truth(seed: int, size: int) -> np.ndarray:
    """Smooth colour image: base colour plus 3-6 low-frequency waves or ramps."""
    rng = np.random.default_rng([seed, 1])
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.broadcast_to(rng.uniform(0.25, 0.6, size=3), (size, size, 3)).copy()
    for _ in range(rng.integers(3, 7)):
        colour = rng.uniform(-0.12, 0.12, size=3)
        if rng.random() < 0.5:
            fy, fx = rng.uniform(0.3, 2.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        else:
            angle = rng.uniform(0, 2 * np.pi)
            wave = 2 * (np.cos(angle) * xx + np.sin(angle) * yy) - 1
            wave = wave / max(np.abs(wave).max(), 1e-12)
        img += wave[..., None] * colour
    return np.clip(img, 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    kind = rng.integers(3)
    if kind == 0:
        h, w = rng.uniform(0.2, 0.75, size=2) * size
        y0 = rng.uniform(0, size - h)
        x0 = rng.uniform(0, size - w)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if kind == 1:
        ry, rx = rng.uniform(0.12, 0.42, size=2) * size
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # convex polygon: sorted angles around a centre
    n = rng.integers(3, 8)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.15, 0.45, size=n) * size
    py, px = cy + radii * np.sin(angles), cx + radii * np.cos(angles)
    inside = np.ones_like(yy, dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
        inside &= cross >= 0
    return inside


def generate_mask(seed: int, size: int) -> np.ndarray:
    """Hard {0, 1} mask of a random rectangle, ellipse or convex polygon."""
    rng = np.random.default_rng([seed, 2])
    lo, hi = FG_FRACTION_RANGE
    while True:
        mask = _shape_mask(rng, size)
        if lo <= mask.mean() <= hi:
            return mask.astype(np.float64)


def perturb_foreground(gt: np.ndarray, mask: np.ndarray, spec: PerturbSpec, seed: int | None = None) -> SyntheticSample:
    """Shift the foreground's Lab values and scale its RGB by a gain.

    Pixels with mask <= 0.5 are copied from ``gt`` unchanged.
    """
    rng = np.random.default_rng([spec.seed if seed is None else seed, 3])
    dL = rng.uniform(*spec.delta_L_range)
    da = rng.uniform(*spec.delta_a_range)
    db = rng.uniform(*spec.delta_b_range)
    gain = rng.uniform(*spec.gain_range)

    lab = rgb_to_lab(gt) + np.array([dL, da, db])
    lab_clamped = np.clip(lab, [0.0, -128.0, -128.0], [100.0, 128.0, 128.0])
    clamp_count = int(np.count_nonzero(lab_clamped != lab))
    shifted, gamut_clamps = lab_to_rgb(lab_clamped, with_clamp_count=True)
    scaled = shifted * gain
    gained = np.clip(scaled, 0.0, 1.0)
    clamp_count += gamut_clamps + int(np.count_nonzero(gained != scaled))

    fg = (np.asarray(mask) > 0.5)[..., None]
    composite = np.where(fg, gained, gt)
    deltas = {"dL": float(dL), "da": float(da), "db": float(db), "gain": float(gain), "clamped": clamp_count}
    return SyntheticSample(gt=gt, mask=np.asarray(mask, dtype=np.float64), composite=composite, deltas=deltas)


def make_sample(index: int, size: int, spec: PerturbSpec) -> SyntheticSample:
    seed = spec.seed + index
    gt = generate_ground_truth(seed, size)
    mask = generate_mask(seed, size)
    sample = perturb_foreground(gt, mask, spec, seed=seed)
    sample.id = f"{index:05d}"
    sample.seed = seed
    return sample


def generate_dataset(n: int, size: int, spec: PerturbSpec, start: int = 0) -> list[SyntheticSample]:
    return [make_sample(start + i, size, spec) for i in range(n)]


def illumination_reflectance_corpus(n_images: int, size: int, seed: int) -> list[np.ndarray]:
    """Images formed as a shared smooth illumination field times per-channel reflectance.

    The shared illumination drives R, G, B together, which is what makes RGB
    channels strongly correlated in natural photos.
    """
    rng = np.random.default_rng([seed, 4])
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    images = []
    for _ in range(n_images):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        field_ = 0.5 + 0.25 * np.sin(2 * np.pi * fy * yy + phase[0]) + 0.25 * np.sin(2 * np.pi * fx * xx + phase[1])
        illum = 0.05 + 0.95 * field_ * rng.uniform(0.2, 1.0)
        reflect = rng.uniform(0.7, 1.0, size=3) + rng.normal(0, 0.01, size=(size, size, 3))
        images.append(np.clip(illum[..., None] * reflect, 0.0, 1.0))
    return images


# ---------------------------------------------------------------- disk layout


def write_dataset(samples: Sequence[SyntheticSample], directory, size: int | None = None, spec: PerturbSpec | None = None):
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_rgb_png(out / f"{s.id}_gt.png", s.gt)
        write_mask_png(out / f"{s.id}_mask.png", s.mask)
        write_rgb_png(out / f"{s.id}_comp.png", s.composite)
    manifest = {
        "version": MANIFEST_VERSION,
        "n_samples": len(samples),
        "size": size if size is not None else (int(samples[0].gt.shape[0]) if samples else 0),
        "spec": spec.to_dict() if spec is not None else None,
        "per_sample": [{"id": s.id, "seed": s.seed, "deltas": s.deltas} for s in samples],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_dataset(directory) -> list[SyntheticSample]:
    """Load samples listed in manifest.json, or every ``*_comp.png`` triplet if none."""
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        entries = json.loads(manifest_path.read_text())["per_sample"]
    else:
        entries = [{"id": p.name[: -len("_comp.png")], "seed": 0, "deltas": {}} for p in sorted(root.glob("*_comp.png"))]
    if not entries:
        raise FileNotFoundError(f"no samples found in {root}")
    samples = []
    for e in entries:
        sid = e["id"]
        samples.append(
            SyntheticSample(
                gt=read_rgb_png(root / f"{sid}_gt.png"),
                mask=read_mask_png(root / f"{sid}_mask.png"),
                composite=read_rgb_png(root / f"{sid}_comp.png"),
                deltas=e.get("deltas", {}),
                id=sid,
                seed=e.get("seed", 0),
            )
        )
    return samples
