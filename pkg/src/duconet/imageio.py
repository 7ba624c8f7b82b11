"""8-bit PNG input/output for RGB images and masks."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_rgb_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(to_uint8(mask)).save(path)


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
