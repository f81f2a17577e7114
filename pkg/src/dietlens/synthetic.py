"""Synthetic eating-scene generator with exactly known groundtruth.

Items are rasterized from pixel centres (no anti-aliasing), so an item's
kcal is its integer pixel count times its category density and the
groundtruth energy map integrates back to it without rounding error.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dietlens.data import (
    BoundingBox,
    DatasetManifest,
    EatingOccasionRecord,
    FoodAnnotation,
    load_manifest,
    save_manifest,
    write_energy_png,
    write_image,
)
from dietlens.energy import EnergyMap

log = logging.getLogger(__name__)

SHAPES = ("disk", "rectangle", "triangle")

_PALETTE = [
    ("rice", "disk", (245, 240, 215), 1.3),
    ("broccoli", "triangle", (40, 140, 50), 0.35),
    ("steak", "rectangle", (130, 60, 40), 2.5),
    ("carrot", "rectangle", (240, 130, 30), 0.4),
    ("apple", "disk", (200, 30, 40), 0.5),
    ("cheese", "triangle", (250, 210, 60), 3.5),
]


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str
    color: tuple[int, int, int]
    density: float  # kcal per pixel

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        if not self.density > 0:
            raise ValueError(f"density must be > 0 for {self.name}")
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (128, 128)
    categories: tuple[CategorySpec, ...] = field(
        default_factory=lambda: tuple(CategorySpec(*p) for p in _PALETTE)
    )
    items_per_scene: tuple[int, int] = (1, 4)
    size_range: tuple[int, int] = (16, 40)
    background: dict = field(default_factory=lambda: {"color": [90, 90, 100]})
    occlusion_allowed: bool = False
    noise_std: float = 3.0
    color_jitter: int = 6
    energy_scale: float = 0.01  # kcal per stored map unit
    gap: int = 2
    max_retries: int = 60

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "items_per_scene", tuple(int(v) for v in self.items_per_scene))
        object.__setattr__(self, "size_range", tuple(int(v) for v in self.size_range))
        cats = tuple(c if isinstance(c, CategorySpec) else CategorySpec(**c) for c in self.categories)
        object.__setattr__(self, "categories", cats)
        w, h = self.image_size
        lo, hi = self.size_range
        if len(cats) < 2:
            raise ValueError("need at least 2 categories")
        if len({c.name for c in cats}) != len(cats):
            raise ValueError("category names must be unique")
        if not (2 <= lo <= hi <= min(w, h)):
            raise ValueError(f"size_range {self.size_range} must lie within the image {self.image_size}")
        if not (0 <= self.items_per_scene[0] <= self.items_per_scene[1]):
            raise ValueError(f"bad items_per_scene {self.items_per_scene}")
        if not self.energy_scale > 0:
            raise ValueError("energy_scale must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for c in cats:
            units = self.density_units(c)
            if units < 1 or units > 65535:
                raise ValueError(f"density of {c.name} does not fit a 16-bit map at energy_scale {self.energy_scale}")

    @property
    def label_set(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.categories)

    def density_units(self, cat: CategorySpec) -> int:
        return int(round(cat.density / self.energy_scale))

    @property
    def map_max(self) -> float:
        """Largest stored map value any pixel can take."""
        return float(max(self.density_units(c) for c in self.categories))

    @classmethod
    def with_categories(cls, n: int, **kwargs) -> SceneConfig:
        """Config with ``n`` procedurally coloured categories (e.g. 31)."""
        cats = []
        for i in range(n):
            if i < len(_PALETTE) and n <= len(_PALETTE):
                cats.append(CategorySpec(*_PALETTE[i]))
                continue
            hue = (i * 0.618033988749895) % 1.0
            val = 0.95 if i % 2 == 0 else 0.7
            r, g, b = colorsys.hsv_to_rgb(hue, 0.85, val)
            cats.append(
                CategorySpec(
                    name=f"food_{i:02d}",
                    shape=SHAPES[i % 3],
                    color=(int(r * 255), int(g * 255), int(b * 255)),
                    density=round(0.3 + 0.1 * i, 2),
                )
            )
        return cls(categories=tuple(cats), **kwargs)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["categories"] = [asdict(c) for c in self.categories]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> SceneConfig:
        doc = dict(doc)
        if "categories" in doc:
            doc["categories"] = tuple(CategorySpec(**c) for c in doc["categories"])
        return cls(**doc)


@dataclass
class Scene:
    record: EatingOccasionRecord
    image: np.ndarray  # HxWx3 uint8
    energy_map: EnergyMap  # uint16 raster
    masks: list[np.ndarray]  # visible pixels per annotation
    dropped_items: int = 0


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Boolean ``h x w`` mask of a shape inscribed in its box, sampled at pixel centres."""
    ys, xs = np.mgrid[0:h, 0:w]
    u = (xs + 0.5) / w
    v = (ys + 0.5) / h
    if shape == "disk":
        mask = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif shape == "rectangle":
        mask = np.ones((h, w), dtype=bool)
    elif shape == "triangle":
        # apex at top centre, base along the bottom edge
        mask = np.abs(u - 0.5) <= 0.5 * v
    else:
        raise ValueError(shape)
    return mask


def _background(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    w, h = config.image_size
    bg = config.background
    if "texture" in bg:
        if bg["texture"] != "checker":
            raise ValueError(f"unknown background texture {bg['texture']!r}")
        cell = int(bg.get("cell", 8))
        c0, c1 = (np.array(c, dtype=np.float64) for c in bg.get("colors", [[90, 90, 100], [110, 110, 120]]))
        ys, xs = np.mgrid[0:h, 0:w]
        checker = ((xs // cell + ys // cell) % 2).astype(bool)
        img = np.where(checker[..., None], c1, c0)
    else:
        img = np.empty((h, w, 3), dtype=np.float64)
        img[:] = np.array(bg.get("color", [90, 90, 100]), dtype=np.float64)
    return img


def _place(config: SceneConfig, n_items: int, rng: np.random.Generator):
    """Try to lay out ``n_items``; return list of (category idx, full mask, origin) or None."""
    w, h = config.image_size
    lo, hi = config.size_range
    occupied = np.zeros((h, w), dtype=bool)  # union of placed item boxes
    placed = []
    for _ in range(n_items):
        cat_idx = int(rng.integers(len(config.categories)))
        cat = config.categories[cat_idx]
        for _attempt in range(config.max_retries):
            iw = int(rng.integers(lo, hi + 1))
            ih = iw if cat.shape == "disk" else int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, w - iw + 1))
            y0 = int(rng.integers(0, h - ih + 1))
            local = shape_mask(cat.shape, iw, ih)
            full = np.zeros((h, w), dtype=bool)
            full[y0 : y0 + ih, x0 : x0 + iw] = local
            if not config.occlusion_allowed:
                # keep whole boxes apart so no item's pixels fall inside another's box
                g = config.gap
                if occupied[max(0, y0 - g) : y0 + ih + g, max(0, x0 - g) : x0 + iw + g].any():
                    continue
            occupied[y0 : y0 + ih, x0 : x0 + iw] = True
            placed.append((cat_idx, full))
            break
        else:
            return None
    return placed


def generate_scene(config: SceneConfig, seed: int, image_id: str | None = None) -> Scene:
    """Render one scene; identical ``(config, seed)`` gives bit-identical output."""
    rng = np.random.default_rng(seed)
    image_id = image_id or f"scene_{seed}"
    lo, hi = config.items_per_scene
    n_items = int(rng.integers(lo, hi + 1))
    requested = n_items
    while True:
        placed = _place(config, n_items, rng)
        if placed is not None:
            break
        log.warning("%s: could not place %d items, retrying with %d", image_id, n_items, n_items - 1)
        n_items -= 1

    w, h = config.image_size
    img = _background(config, rng)
    units = np.zeros((h, w), dtype=np.uint16)
    owner = np.full((h, w), -1, dtype=np.int64)
    for k, (cat_idx, full) in enumerate(placed):
        cat = config.categories[cat_idx]
        jitter = rng.integers(-config.color_jitter, config.color_jitter + 1, size=3)
        color = np.clip(np.array(cat.color) + jitter, 0, 255)
        img[full] = color
        units[full] = config.density_units(cat)
        owner[full] = k
    if config.noise_std > 0:
        img = img + rng.normal(0.0, config.noise_std, size=img.shape)
    image = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)

    annotations = []
    masks = []
    for k, (cat_idx, full) in enumerate(placed):
        cat = config.categories[cat_idx]
        visible = owner == k
        if not visible.any():
            continue
        rows = np.flatnonzero(visible.any(axis=1))
        cols = np.flatnonzero(visible.any(axis=0))
        bbox = BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
        # integer product first, then one multiply: matches integrate_energy bit for bit
        kcal = int(full.sum()) * config.density_units(cat) * config.energy_scale
        annotations.append(FoodAnnotation(bbox, cat.name, kcal))
        masks.append(visible)

    record = EatingOccasionRecord(
        image_id=image_id,
        image_path=f"images/{image_id}.png",
        annotations=tuple(annotations),
        energy_map_path=f"maps/{image_id}.png",
        energy_scale=config.energy_scale,
    )
    return Scene(record, image, EnergyMap(units, config.energy_scale), masks, requested - n_items)


def scene_seeds(n: int, seed: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


def generate_dataset(
    n: int, config: SceneConfig, seed: int, out_dir: str | Path, manifest_name: str = "manifest.json"
) -> DatasetManifest:
    """Render ``n`` scenes under ``out_dir`` and write a validated manifest."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(scene_seeds(n, seed)):
        scene = generate_scene(config, s, image_id=f"scene_{i:05d}")
        write_image(out_dir / scene.record.image_path, scene.image)
        write_energy_png(out_dir / scene.record.energy_map_path, scene.energy_map.raster)
        records.append(scene.record)
    manifest = DatasetManifest(tuple(records), config.label_set, None, out_dir)
    path = save_manifest(manifest, out_dir / manifest_name)
    return load_manifest(path)
