"""Synthetic mini-dataset of colored geometric textures.

Every CLI path can run end-to-end on this generated data: two sources
(A with larger images, B with smaller, varied resolutions), dish labels
per class and coarser category labels shared by groups of classes.
Classes within a category share a hue family; the class determines the
pattern, so both label levels are learnable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Manifest, SampleRecord, save_manifest
from .image import RasterImage, write_ppm

_PATTERNS = ("stripes", "checker", "diag", "rings")


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb) * 255.0


def class_texture(cls: int, classes: int, n_categories: int, width: int, height: int,
                 rng: np.random.Generator) -> np.ndarray:
    per_cat = -(-classes // n_categories)
    cat = cls // per_cat
    within = cls % per_cat
    hue = (cat + 0.15 + 0.7 * within / max(1, per_cat)) / n_categories
    base = _hsv_to_rgb(hue % 1.0, 0.75, 0.85)
    other = _hsv_to_rgb((hue + 0.5) % 1.0, 0.6, 0.55)
    yy, xx = np.mgrid[0:height, 0:width]
    period = 6 + 3 * (cls % 4)
    kind = _PATTERNS[cls % len(_PATTERNS)]
    if kind == "stripes":
        mask = (xx // period) % 2
    elif kind == "checker":
        mask = ((xx // period) + (yy // period)) % 2
    elif kind == "diag":
        mask = ((xx + yy) // period) % 2
    else:
        cx, cy = width / 2.0, height / 2.0
        mask = (np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) // period) % 2
    img = np.where(mask[..., None] > 0, other, base)
    img = img + rng.normal(0.0, 8.0, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic_dataset(out_dir, source: str, classes: int = 8,
                               per_class: int = 20, size_range=(40, 80),
                               n_categories: int = 4, seed: int = 0,
                               square: bool = False) -> Manifest:
    """Write PPM images plus a manifest.tsv under out_dir; returns the manifest."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    lo, hi = size_range
    records = []
    for cls in range(classes):
        dish = f"dish_{cls:02d}"
        per_cat = -(-classes // n_categories)
        category = f"cat_{cls // per_cat}"
        dish_dir = out_dir / source / dish
        dish_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            w = int(rng.integers(lo, hi + 1))
            h = w if square else int(rng.integers(lo, hi + 1))
            img = class_texture(cls, classes, n_categories, w, h, rng)
            path = dish_dir / f"img_{i:03d}.ppm"
            write_ppm(path, RasterImage.from_array(img))
            records.append(SampleRecord(str(path), dish, category, source))
    manifest = Manifest.from_records(records)
    save_manifest(out_dir / f"manifest_{source.lower()}.tsv", manifest)
    return manifest
