"""Geometric augmentation (two rotations, three flips) that carries boxes and energy maps along."""

from __future__ import annotations

import enum
import os
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from dietlens.data import (
    BoundingBox,
    DatasetManifest,
    EatingOccasionRecord,
    FoodAnnotation,
    read_energy_png,
    round_half_up,
    write_energy_png,
    write_image,
)


class AugmentOp(str, enum.Enum):
    ROT90 = "rot90"
    ROT270 = "rot270"
    FLIP_H = "flip_h"  # mirror across the vertical axis, x -> W - x
    FLIP_V = "flip_v"  # mirror across the horizontal axis, y -> H - y
    FLIP_BOTH = "flip_both"


ALL_OPS = tuple(AugmentOp)
MAX_OPS = len(ALL_OPS)


def transform_frame(op: AugmentOp, width: int, height: int) -> tuple[int, int]:
    op = AugmentOp(op)
    if op in (AugmentOp.ROT90, AugmentOp.ROT270):
        return height, width
    return width, height


def transform_point(x: float, y: float, op: AugmentOp, width: float, height: float) -> tuple[float, float]:
    """Map a continuous pixel-grid point; rot90 is counter-clockwise on screen, like ``np.rot90``."""
    op = AugmentOp(op)
    if op is AugmentOp.ROT90:
        return y, width - x
    if op is AugmentOp.ROT270:
        return height - y, x
    if op is AugmentOp.FLIP_H:
        return width - x, y
    if op is AugmentOp.FLIP_V:
        return x, height - y
    return width - x, height - y


def transform_bbox(bbox: BoundingBox, op: AugmentOp, width: float, height: float) -> BoundingBox:
    if not bbox.within(width, height):
        raise ValueError(f"bbox {bbox.to_list()} exceeds {width}x{height} frame")
    corners = [
        transform_point(x, y, op, width, height)
        for x in (bbox.x1, bbox.x2)
        for y in (bbox.y1, bbox.y2)
    ]
    xs = [c[0] for c in corners]
    ys = [c[1] for c in corners]
    return BoundingBox(min(xs), min(ys), max(xs), max(ys))


def transform_raster(raster: np.ndarray, op: AugmentOp) -> np.ndarray:
    """Apply ``op`` to an HxW or HxWxC array (returns a contiguous copy)."""
    op = AugmentOp(op)
    if op is AugmentOp.ROT90:
        out = np.rot90(raster, 1)
    elif op is AugmentOp.ROT270:
        out = np.rot90(raster, 3)
    elif op is AugmentOp.FLIP_H:
        out = raster[:, ::-1]
    elif op is AugmentOp.FLIP_V:
        out = raster[::-1]
    else:
        out = raster[::-1, ::-1]
    return np.ascontiguousarray(out)


def transform_sample(image: np.ndarray, annotations, op: AugmentOp, energy_raster: np.ndarray | None = None):
    """Pure in-memory form of :func:`augment_record`."""
    height, width = image.shape[:2]
    anns = tuple(
        FoodAnnotation(transform_bbox(a.bbox, op, width, height), a.category, a.kcal) for a in annotations
    )
    emap = None if energy_raster is None else transform_raster(energy_raster, op)
    return transform_raster(image, op), anns, emap


def augment_record(
    record: EatingOccasionRecord, op: AugmentOp, manifest: DatasetManifest, out_dir: str | Path
) -> EatingOccasionRecord:
    """Write the transformed image/map under ``out_dir`` and return the new record.

    Paths in the returned record are relative to ``out_dir``.
    """
    op = AugmentOp(op)
    out_dir = Path(out_dir)
    image = manifest.load_image(record)
    raster = None
    if record.energy_map_path is not None:
        raster = read_energy_png(manifest.resolve(record.energy_map_path))
    new_img, anns, new_map = transform_sample(image, record.annotations, op, raster)

    new_id = f"{record.image_id}#{op.value}"
    stem = new_id.replace("#", "__")
    image_path = f"images/{stem}.png"
    write_image(out_dir / image_path, new_img)
    map_path = None
    if new_map is not None:
        map_path = f"maps/{stem}.png"
        write_energy_png(out_dir / map_path, new_map)
    return replace(record, image_id=new_id, image_path=image_path, annotations=anns, energy_map_path=map_path)


def ops_for_rarity(rarest_count: int, max_count: int) -> int:
    """Number of ops for a record whose rarest category has ``rarest_count`` train images."""
    if max_count <= 0:
        return 0
    k = round_half_up(MAX_OPS * (1.0 - rarest_count / max_count))
    return min(max(k, 0), MAX_OPS)


def category_image_counts(records) -> Counter:
    counts: Counter = Counter()
    for rec in records:
        counts.update(set(rec.categories))
    return counts


def plan_balance(records, seed: int) -> list[list[AugmentOp]]:
    """Ops to apply to each record, rarer categories getting more of them."""
    counts = category_image_counts(records)
    c_max = max(counts.values(), default=0)
    rng = np.random.default_rng(seed)
    plan = []
    for rec in records:
        if not rec.annotations:
            plan.append([])
            continue
        k = ops_for_rarity(min(counts[c] for c in rec.categories), c_max)
        picks = rng.choice(MAX_OPS, size=k, replace=False) if k else []
        plan.append([ALL_OPS[i] for i in sorted(int(p) for p in picks)])
    return plan


def _rebase(path: str | None, src_root: Path, dst_root: Path) -> str | None:
    if path is None or Path(path).is_absolute():
        return path
    return Path(os.path.relpath(src_root / path, dst_root)).as_posix()


def balance_augment(manifest: DatasetManifest, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Augment the train split; other splits and all originals are kept as-is.

    The returned manifest is rooted at ``out_dir``; original records keep
    pointing at their existing files through relative paths.
    """
    out_dir = Path(out_dir)
    train = manifest.subset("train").records
    if not train:
        raise ValueError("balance_augment needs a nonempty train split")
    plan = plan_balance(train, seed)

    src_root = manifest.root.resolve()
    dst_root = out_dir.resolve()
    records = [
        replace(
            r,
            image_path=_rebase(r.image_path, src_root, dst_root),
            energy_map_path=_rebase(r.energy_map_path, src_root, dst_root),
        )
        for r in manifest.records
    ]
    tags = dict(manifest.split_tags) if manifest.split_tags is not None else {r.image_id: "train" for r in records}
    for rec, ops in zip(train, plan):
        for op in ops:
            new = augment_record(rec, op, manifest, out_dir)
            records.append(new)
            tags[new.image_id] = "train"
    return DatasetManifest(tuple(records), manifest.label_set, tags, out_dir)


__all__ = [
    "AugmentOp",
    "ALL_OPS",
    "augment_record",
    "balance_augment",
    "ops_for_rarity",
    "plan_balance",
    "transform_bbox",
    "transform_frame",
    "transform_raster",
    "transform_sample",
]
