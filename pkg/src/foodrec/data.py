"""Manifest-driven dataset handling.

A manifest is a UTF-8 TSV with one record per line:

    image_path <TAB> dish_label <TAB> category_label <TAB> source [<TAB> split]

category_label may be empty; source is A (international set) or B
(Mediterranean set); split, when present, is train/val/test/unassigned.
All operations are pure functions of (manifest, seed) and return new
manifests; records never mutate in place.
"""

from __future__ import annotations

import logging
import os
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import ContractError, ValidationError
from .image import RasterImage, bicubic_resize, read_ppm, read_ppm_dims, resize_image, write_ppm
from .sr import ScnParams, super_resolve, upscale_factor

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "unassigned")
SOURCES = ("A", "B")


class DatasetVariant(str, Enum):
    original = "original"
    b_super_resolved = "b_super_resolved"
    a_halved = "a_halved"


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    dish_label: str
    category_label: str | None
    source: str
    split: str = "unassigned"


@dataclass
class Manifest:
    records: tuple[SampleRecord, ...]
    class_index: dict[str, int] = field(default_factory=dict)
    category_index: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records) -> "Manifest":
        records = tuple(records)
        seen_paths = set()
        class_index: "OrderedDict[str, int]" = OrderedDict()
        category_index: "OrderedDict[str, int]" = OrderedDict()
        for i, r in enumerate(records):
            if not r.dish_label:
                raise ValidationError(f"record {i} ({r.image_path}): empty dish label")
            if r.source not in SOURCES:
                raise ValidationError(f"record {i} ({r.image_path}): bad source {r.source!r}")
            if r.split not in SPLITS:
                raise ValidationError(f"record {i} ({r.image_path}): bad split {r.split!r}")
            if r.image_path in seen_paths:
                raise ValidationError(f"duplicate image path {r.image_path}")
            seen_paths.add(r.image_path)
            if r.dish_label not in class_index:
                class_index[r.dish_label] = len(class_index)
            if r.category_label and r.category_label not in category_index:
                category_index[r.category_label] = len(category_index)
        return cls(records=records, class_index=dict(class_index),
                   category_index=dict(category_index))

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    def class_counts(self) -> Counter:
        return Counter(r.dish_label for r in self.records)

    def subset(self, predicate) -> "Manifest":
        return Manifest.from_records(r for r in self.records if predicate(r))


def load_manifest(path) -> Manifest:
    records = []
    bad = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5):
                bad.append(f"line {lineno}: expected 4 or 5 tab-separated fields, got {len(parts)}")
                continue
            p, dish, cat, src = parts[:4]
            split = parts[4] if len(parts) == 5 else "unassigned"
            if not p:
                bad.append(f"line {lineno}: empty image path")
                continue
            if not dish:
                bad.append(f"line {lineno}: missing dish label")
                continue
            if src not in SOURCES:
                bad.append(f"line {lineno}: source must be one of {SOURCES}, got {src!r}")
                continue
            if split not in SPLITS:
                bad.append(f"line {lineno}: bad split {split!r}")
                continue
            records.append(SampleRecord(p, dish, cat or None, src, split))
    if bad:
        raise ValidationError(f"{path}: " + "; ".join(bad))
    return Manifest.from_records(records)


def save_manifest(path, manifest: Manifest) -> None:
    with_split = any(r.split != "unassigned" for r in manifest.records)
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.records:
            row = [r.image_path, r.dish_label, r.category_label or "", r.source]
            if with_split:
                row.append(r.split)
            f.write("\t".join(row) + "\n")


def filter_min_images(manifest: Manifest, threshold: int) -> Manifest:
    """Drop every class with fewer than threshold images."""
    if threshold < 1:
        raise ContractError(f"threshold must be >= 1, got {threshold}")
    counts = manifest.class_counts()
    return Manifest.from_records(r for r in manifest.records
                                 if counts[r.dish_label] >= threshold)


def merge_datasets(a: Manifest, b: Manifest) -> Manifest:
    """Concatenate two manifests with disjoint class namespaces.

    Dish labels get a source prefix, so b's class ids land after a's.
    """
    def prefixed(r: SampleRecord) -> SampleRecord:
        want = f"{r.source}:"
        if r.dish_label.startswith(want):
            return r
        return replace(r, dish_label=want + r.dish_label)

    merged = [prefixed(r) for r in a.records] + [prefixed(r) for r in b.records]
    paths_a = {r.image_path for r in a.records}
    dup = [r.image_path for r in b.records if r.image_path in paths_a]
    if dup:
        raise ValidationError(f"image paths present in both datasets: {dup[:5]}")
    labels_a = {r.dish_label for r in merged[:len(a.records)]}
    labels_b = {r.dish_label for r in merged[len(a.records):]}
    if labels_a & labels_b:
        raise ValidationError(f"class namespaces overlap after prefixing: {sorted(labels_a & labels_b)[:5]}")
    return Manifest.from_records(merged)


def filter_by_source(manifest: Manifest, source: str, strip_prefix: bool = True) -> Manifest:
    """Records of one source; by default undo the merge-time label prefix."""
    out = []
    for r in manifest.records:
        if r.source != source:
            continue
        if strip_prefix and r.dish_label.startswith(f"{source}:"):
            r = replace(r, dish_label=r.dish_label[len(source) + 1:])
        out.append(r)
    return Manifest.from_records(out)


def balance_classes(manifest: Manifest, cap: int, seed: int) -> Manifest:
    """Cap every class at cap records via seeded sampling without replacement."""
    if cap < 1:
        raise ContractError(f"cap must be >= 1, got {cap}")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.dish_label, []).append(i)
    keep = set()
    for dish in manifest.class_index:  # class id order for determinism
        idxs = by_class[dish]
        if len(idxs) > cap:
            chosen = rng.choice(len(idxs), size=cap, replace=False)
            keep.update(idxs[c] for c in chosen)
        else:
            keep.update(idxs)
    return Manifest.from_records(r for i, r in enumerate(manifest.records) if i in keep)


def _largest_remainder(n: int, ratios) -> list[int]:
    exact = [r * n for r in ratios]
    base = [int(np.floor(e)) for e in exact]
    short = n - sum(base)
    # distribute leftovers by descending fractional part, earlier phase on ties
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def split_dataset(manifest: Manifest, ratios: tuple[float, float, float],
                  seed: int) -> Manifest:
    """Per-class stratified train/val/test assignment.

    Each class is shuffled with the seeded generator and partitioned by
    largest-remainder rounding of the ratios. Classes with fewer than 3
    images go entirely to train (with a warning). Record order is kept.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or ratios[0] <= 0:
        raise ContractError(f"ratios must be three non-negatives with train > 0, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.dish_label, []).append(i)

    assignment = ["train"] * len(manifest.records)
    names = ("train", "val", "test")
    for dish in manifest.class_index:
        idxs = by_class[dish]
        if len(idxs) < 3:
            log.warning("class %r has %d images (< 3): all assigned to train", dish, len(idxs))
            continue
        perm = rng.permutation(len(idxs))
        counts = _largest_remainder(len(idxs), ratios)
        pos = 0
        for name, cnt in zip(names, counts):
            for k in perm[pos:pos + cnt]:
                assignment[idxs[k]] = name
            pos += cnt
    return Manifest.from_records(
        replace(r, split=assignment[i]) for i, r in enumerate(manifest.records))


# ---------------------------------------------------------------------------
# variant materialization

def _mirror_path(image_path: str, out_root, src_root) -> Path:
    p = Path(image_path)
    try:
        rel = p.relative_to(src_root)
    except ValueError:
        rel = Path(p.name)
    return Path(out_root) / rel


def apply_variant(manifest: Manifest, variant: DatasetVariant,
                  scn: ScnParams | None = None, out_root=None,
                  target: int = 256) -> tuple[Manifest, list[tuple[str, str]]]:
    """Materialize a resolution variant of the dataset.

    original: untouched. a_halved: every source-A image at half width and
    height. b_super_resolved: every source-B image whose short side is
    below target lifted with the learned upscaler. Modified images are
    written under out_root mirroring the source tree; untouched records
    keep their original path. Per-file failures are collected and
    returned, not raised.
    """
    variant = DatasetVariant(variant)
    if variant == DatasetVariant.original:
        return manifest, []
    if out_root is None:
        raise ContractError(f"variant {variant.value} requires out_root")
    if variant == DatasetVariant.b_super_resolved and scn is None:
        raise ContractError("b_super_resolved requires trained upscaler params")

    paths = [Path(r.image_path).parent for r in manifest.records]
    src_root = os.path.commonpath([str(p) for p in paths]) if paths else "."
    out_records = []
    errors: list[tuple[str, str]] = []
    for r in manifest.records:
        try:
            if variant == DatasetVariant.a_halved and r.source == "A":
                img = read_ppm(r.image_path)
                half = resize_image(img, max(1, img.width // 2), max(1, img.height // 2))
                dest = _mirror_path(r.image_path, out_root, src_root)
                dest.parent.mkdir(parents=True, exist_ok=True)
                write_ppm(dest, half)
                out_records.append(replace(r, image_path=str(dest)))
            elif variant == DatasetVariant.b_super_resolved and r.source == "B":
                w, h = read_ppm_dims(r.image_path)
                f = upscale_factor(w, h, target)
                if f < 2:
                    out_records.append(r)
                    continue
                img = read_ppm(r.image_path)
                lifted = super_resolve(img, f, scn)
                dest = _mirror_path(r.image_path, out_root, src_root)
                dest.parent.mkdir(parents=True, exist_ok=True)
                write_ppm(dest, lifted)
                out_records.append(replace(r, image_path=str(dest)))
            else:
                out_records.append(r)
        except Exception as exc:  # per-file, run continues
            errors.append((r.image_path, str(exc)))
    return Manifest.from_records(out_records), errors


# ---------------------------------------------------------------------------
# sample preparation

def _to_chw(img: RasterImage, resize_to: int) -> np.ndarray:
    arr = img.pixels
    if img.width != resize_to or img.height != resize_to:
        arr = bicubic_resize(arr, resize_to, resize_to)
    arr = arr.astype(np.float64)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.moveaxis(arr, 2, 0)  # (3, H, W)


def prepare_train_sample(image: RasterImage, crop: int = 224,
                         rng: np.random.Generator | None = None,
                         mean=(0.0, 0.0, 0.0), resize_to: int = 256) -> ag.Tensor:
    """Resize, random-crop and normalize one training image to (3,crop,crop)."""
    if crop > resize_to:
        raise ContractError(f"crop {crop} larger than resized image {resize_to}")
    if rng is None:
        rng = np.random.default_rng(0)
    chw = _to_chw(image, resize_to)
    oy = int(rng.integers(0, resize_to - crop + 1))
    ox = int(rng.integers(0, resize_to - crop + 1))
    patch = chw[:, oy:oy + crop, ox:ox + crop] / 255.0
    patch = patch - np.asarray(mean, dtype=np.float64)[:, None, None]
    return ag.Tensor(patch.astype(np.float32))


def prepare_eval_sample(image: RasterImage, crop: int = 224,
                        mean=(0.0, 0.0, 0.0), resize_to: int = 256) -> ag.Tensor:
    """Deterministic center-crop variant of prepare_train_sample."""
    if crop > resize_to:
        raise ContractError(f"crop {crop} larger than resized image {resize_to}")
    chw = _to_chw(image, resize_to)
    off = (resize_to - crop) // 2
    patch = chw[:, off:off + crop, off:off + crop] / 255.0
    patch = patch - np.asarray(mean, dtype=np.float64)[:, None, None]
    return ag.Tensor(patch.astype(np.float32))


def compute_channel_means(manifest: Manifest, resize_to: int = 256,
                          split: str = "train") -> np.ndarray:
    """Per-channel pixel means (in [0,1]) over the resized images of a split."""
    total = np.zeros(3)
    n = 0
    for r in manifest.records:
        if r.split != split:
            continue
        chw = _to_chw(read_ppm(r.image_path), resize_to)
        total += chw.mean(axis=(1, 2))
        n += 1
    if n == 0:
        raise ContractError(f"no records in split {split!r}")
    return total / n / 255.0


# ---------------------------------------------------------------------------
# statistics

@dataclass
class DatasetStats:
    total_images: int
    total_dishes: int
    per_category: list  # (category, n_dishes, pct_dishes, n_images)
    per_class: dict     # dish -> count
    dims: list          # (width, height) per readable record
    errors: list        # (path, message) for unreadable files


def dataset_stats(manifest: Manifest, read_dims: bool = True) -> DatasetStats:
    per_class = dict(manifest.class_counts())
    dish_category: dict[str, str] = {}
    for r in manifest.records:
        dish_category.setdefault(r.dish_label, r.category_label or "(uncategorized)")
    cat_dishes: dict[str, set] = {}
    cat_images: dict[str, int] = {}
    for dish, cnt in per_class.items():
        cat = dish_category[dish]
        cat_dishes.setdefault(cat, set()).add(dish)
        cat_images[cat] = cat_images.get(cat, 0) + cnt
    total_dishes = len(per_class)
    rows = []
    for cat in sorted(cat_images, key=lambda c: (-cat_images[c], c)):
        nd = len(cat_dishes[cat])
        rows.append((cat, nd, 100.0 * nd / total_dishes, cat_images[cat]))

    dims = []
    errors = []
    if read_dims:
        for r in manifest.records:
            try:
                dims.append(read_ppm_dims(r.image_path))
            except Exception as exc:
                errors.append((r.image_path, str(exc)))
    return DatasetStats(total_images=len(manifest.records), total_dishes=total_dishes,
                        per_category=rows, per_class=per_class, dims=dims, errors=errors)
