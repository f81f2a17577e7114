"""Data model, manifest I/O, deterministic splits and region cropping."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised when a manifest or one of its records fails validation."""

    def __init__(self, message: str, image_id: str | None = None, field: str | None = None):
        self.image_id = image_id
        self.field = field
        where = []
        if image_id is not None:
            where.append(f"image_id={image_id}")
        if field is not None:
            where.append(f"field={field}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


def round_half_up(value: float) -> int:
    # Python's round() is banker's rounding; pixel snapping wants half-up.
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box ``[x1, y1, x2, y2]`` in pixel coordinates, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        values = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite box coordinates {values}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {list(values)}: need x1 < x2 and y1 < y2")

    @classmethod
    def from_list(cls, coords) -> BoundingBox:
        if len(coords) != 4:
            raise ValueError(f"bbox needs 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def within(self, width: float, height: float) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height

    def clip(self, width: float, height: float) -> BoundingBox | None:
        """Clip to ``[0, width] x [0, height]``; None if nothing is left."""
        x1, y1 = max(0.0, self.x1), max(0.0, self.y1)
        x2, y2 = min(float(width), self.x2), min(float(height), self.y2)
        if x1 >= x2 or y1 >= y2:
            return None
        return BoundingBox(x1, y1, x2, y2)


@dataclass(frozen=True)
class FoodAnnotation:
    bbox: BoundingBox
    category: str
    kcal: float

    def __post_init__(self) -> None:
        if not (self.kcal >= 0 and math.isfinite(self.kcal)):
            raise ValueError(f"kcal must be finite and >= 0, got {self.kcal}")

    def to_json(self) -> dict:
        return {"bbox": self.bbox.to_list(), "category": self.category, "kcal": self.kcal}


@dataclass(frozen=True)
class EatingOccasionRecord:
    """One eating-occasion image with its food annotations.

    Paths are stored exactly as written in the manifest; relative paths are
    resolved against the manifest's directory (``DatasetManifest.root``).
    """

    image_id: str
    image_path: str
    annotations: tuple[FoodAnnotation, ...] = ()
    energy_map_path: str | None = None
    energy_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if not (self.energy_scale > 0 and math.isfinite(self.energy_scale)):
            raise ValueError(f"energy_scale must be positive, got {self.energy_scale}")

    @property
    def categories(self) -> list[str]:
        return [a.category for a in self.annotations]

    @property
    def total_kcal(self) -> float:
        return float(sum(a.kcal for a in self.annotations))

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "energy_map_path": self.energy_map_path,
            "energy_scale": self.energy_scale,
            "annotations": [a.to_json() for a in self.annotations],
        }


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[EatingOccasionRecord, ...]
    label_set: tuple[str, ...]
    split_tags: dict[str, str] | None = None
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "label_set", tuple(self.label_set))
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def record(self, image_id: str) -> EatingOccasionRecord:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def subset(self, split: str) -> DatasetManifest:
        """Records tagged with ``split``; an untagged manifest counts as all-train."""
        if self.split_tags is None:
            recs = self.records if split == "train" else ()
        else:
            recs = tuple(r for r in self.records if self.split_tags.get(r.image_id) == split)
        tags = {r.image_id: split for r in recs}
        return replace(self, records=recs, split_tags=tags)

    def load_image(self, rec: EatingOccasionRecord) -> np.ndarray:
        return read_image(self.resolve(rec.image_path))

    def load_energy_map(self, rec: EatingOccasionRecord):
        from dietlens.energy import EnergyMap

        if rec.energy_map_path is None:
            raise ManifestError("record has no groundtruth energy map", rec.image_id, "energy_map_path")
        raster = read_energy_png(self.resolve(rec.energy_map_path))
        return EnergyMap(raster, rec.energy_scale)

    def to_json(self) -> dict:
        doc = {
            "label_set": list(self.label_set),
            "records": [r.to_json() for r in self.records],
        }
        if self.split_tags is not None:
            doc["split"] = dict(sorted(self.split_tags.items()))
        return doc


# --------------------------------------------------------------------------- I/O


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path: str | Path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path)


def read_energy_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: energy map must be single-channel")
    return arr.astype(np.uint16)


def write_energy_png(path: str | Path, raster: np.ndarray) -> None:
    """Store a map as 16-bit PNG; float rasters are rounded to the nearest unit."""
    raster = np.asarray(raster)
    if raster.dtype.kind == "f":
        raster = np.floor(np.clip(raster, 0, 65535) + 0.5)
    if raster.min(initial=0) < 0 or raster.max(initial=0) > 65535:
        raise ValueError("energy map values out of 16-bit range")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(raster, dtype=np.uint16)).save(path)


def image_size(path: str | Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def _parse_record(obj: dict, labels: set[str], root: Path, check_files: bool) -> EatingOccasionRecord:
    image_id = obj.get("image_id")
    if not isinstance(image_id, str) or not image_id:
        raise ManifestError("missing or empty image_id", None, "image_id")
    for key in ("image_path", "annotations"):
        if key not in obj:
            raise ManifestError(f"missing key {key!r}", image_id, key)
    anns = []
    for i, a in enumerate(obj["annotations"]):
        fld = f"annotations[{i}]"
        try:
            bbox = BoundingBox.from_list(a["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"invalid bbox: {exc}", image_id, fld + ".bbox") from None
        cat = a.get("category")
        if cat not in labels:
            raise ManifestError(f"unknown category {cat!r}", image_id, fld + ".category")
        try:
            anns.append(FoodAnnotation(bbox, cat, float(a["kcal"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"invalid kcal: {exc}", image_id, fld + ".kcal") from None
    try:
        rec = EatingOccasionRecord(
            image_id=image_id,
            image_path=str(obj["image_path"]),
            annotations=tuple(anns),
            energy_map_path=obj.get("energy_map_path"),
            energy_scale=float(obj.get("energy_scale", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestError(str(exc), image_id, "energy_scale") from None

    if check_files:
        img_path = Path(rec.image_path)
        img_path = img_path if img_path.is_absolute() else root / img_path
        if not img_path.is_file():
            raise ManifestError(f"image file not found: {img_path}", image_id, "image_path")
        w, h = image_size(img_path)
        for i, a in enumerate(rec.annotations):
            if not a.bbox.within(w, h):
                raise ManifestError(
                    f"bbox {a.bbox.to_list()} out of bounds for {w}x{h} image",
                    image_id,
                    f"annotations[{i}].bbox",
                )
        if rec.energy_map_path is not None:
            map_path = Path(rec.energy_map_path)
            map_path = map_path if map_path.is_absolute() else root / map_path
            if not map_path.is_file():
                raise ManifestError(f"energy map not found: {map_path}", image_id, "energy_map_path")
            if image_size(map_path) != (w, h):
                raise ManifestError("energy map size differs from image size", image_id, "energy_map_path")
    return rec


def manifest_from_json(doc: dict, root: Path | str = ".", check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    if not isinstance(doc, dict) or "label_set" not in doc or "records" not in doc:
        raise ManifestError("manifest needs 'label_set' and 'records'")
    label_set = [str(c) for c in doc["label_set"]]
    if len(set(label_set)) != len(label_set):
        raise ManifestError("duplicate entries in label_set", None, "label_set")
    labels = set(label_set)
    records = []
    seen: set[str] = set()
    for obj in doc["records"]:
        rec = _parse_record(obj, labels, root, check_files)
        if rec.image_id in seen:
            raise ManifestError("duplicate image_id", rec.image_id, "image_id")
        seen.add(rec.image_id)
        records.append(rec)
    split = doc.get("split")
    if split is not None:
        for image_id, tag in split.items():
            if image_id not in seen:
                raise ManifestError("split tag for unknown record", image_id, "split")
            if tag not in SPLITS:
                raise ManifestError(f"unknown split tag {tag!r}", image_id, "split")
        split = dict(split)
    return DatasetManifest(tuple(records), tuple(label_set), split, root)


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Read and validate a manifest JSON file."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed JSON in {path}: {exc}") from None
    return manifest_from_json(doc, path.parent, check_files)


def dump_manifest(manifest: DatasetManifest) -> str:
    return json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n"


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_manifest(manifest))
    return path


# ----------------------------------------------------------------- splits & crops


def split_dataset(manifest: DatasetManifest, val_frac: float, test_frac: float, seed: int) -> DatasetManifest:
    """Tag every record train/val/test; the split is per occasion, never per item."""
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
        raise ValueError(f"need 0 <= val_frac + test_frac < 1, got {val_frac} + {test_frac}")
    n = len(manifest.records)
    n_val = round_half_up(val_frac * n)
    n_test = round_half_up(test_frac * n)
    order = np.random.default_rng(seed).permutation(n)
    tags = {}
    for rank, idx in enumerate(order):
        tag = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
        tags[manifest.records[idx].image_id] = tag
    return replace(manifest, split_tags=tags)


def pixel_window(bbox: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer window ``(col, row, w, h)`` that a box covers after rounding."""
    if not bbox.within(width, height):
        raise ValueError(f"bbox {bbox.to_list()} exceeds {width}x{height} image")
    col = min(round_half_up(bbox.x1), width - 1)
    row = min(round_half_up(bbox.y1), height - 1)
    w = max(1, round_half_up(bbox.x2 - bbox.x1))
    h = max(1, round_half_up(bbox.y2 - bbox.y1))
    # rounding both origin and extent can overshoot by one pixel at the border
    return col, row, min(w, width - col), min(h, height - row)


def crop_region(image: np.ndarray, bbox: BoundingBox) -> np.ndarray:
    """Sub-raster covered by ``bbox``; works for HxW and HxWxC arrays."""
    height, width = image.shape[:2]
    col, row, w, h = pixel_window(bbox, width, height)
    return image[row : row + h, col : col + w].copy()
