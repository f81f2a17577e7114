from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ann, box
from dietlens.augment import (
    ALL_OPS,
    AugmentOp,
    augment_record,
    balance_augment,
    category_image_counts,
    ops_for_rarity,
    plan_balance,
    transform_bbox,
    transform_raster,
    transform_sample,
)
from dietlens.data import EatingOccasionRecord, load_manifest, save_manifest
from dietlens.energy import EnergyMap, crop_energy_map, integrate_energy

R90, R270, FH, FV, FB = ALL_OPS


def _apply(image, anns, emap, ops):
    for op in ops:
        image, anns, emap = transform_sample(image, anns, op, emap)
    return image, anns, emap


@st.composite
def samples(draw):
    w = draw(st.integers(3, 12))
    h = draw(st.integers(3, 12))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    emap = rng.integers(0, 1000, size=(h, w), dtype=np.uint16)
    anns = []
    for _ in range(draw(st.integers(0, 4))):
        x1 = int(rng.integers(0, w - 1))
        y1 = int(rng.integers(0, h - 1))
        anns.append(ann(x1, y1, rng.integers(x1 + 1, w + 1), rng.integers(y1 + 1, h + 1), "rice", float(rng.integers(0, 500))))
    return image, tuple(anns), emap


def _same(a, b):
    return np.array_equal(a[0], b[0]) and a[1] == b[1] and np.array_equal(a[2], b[2])


@settings(max_examples=60)
@given(samples())
def test_group_laws(sample):
    assert _same(_apply(*sample, [R90] * 4), sample)
    assert _same(_apply(*sample, [FH, FH]), sample)
    assert _same(_apply(*sample, [FV, FV]), sample)
    assert _same(_apply(*sample, [FB]), _apply(*sample, [FH, FV]))
    assert _same(_apply(*sample, [R90, R270]), sample)
    assert _same(_apply(*sample, [R270]), _apply(*sample, [R90] * 3))


@settings(max_examples=60)
@given(samples(), st.sampled_from(ALL_OPS))
def test_ops_preserve_kcal_categories_and_box_energy(sample, op):
    image, anns, emap = sample
    new_img, new_anns, new_map = transform_sample(image, anns, op, emap)
    h, w = new_img.shape[:2]
    assert new_map.shape == (h, w)
    assert Counter((a.category, a.kcal) for a in new_anns) == Counter((a.category, a.kcal) for a in anns)
    for a, b in zip(anns, new_anns):
        assert b.bbox.within(w, h)
        assert b.bbox.area == a.bbox.area
        # the map energy inside a box moves with the box
        before = integrate_energy(crop_energy_map(_emap(emap), a.bbox))
        after = integrate_energy(crop_energy_map(_emap(new_map), b.bbox))
        assert before == after


def _emap(raster):
    return EnergyMap(raster, 1.0)


@pytest.mark.parametrize("op", ALL_OPS)
def test_box_follows_pixels(op):
    h, w = 7, 11
    mask = np.zeros((h, w), np.uint8)
    b = box(2, 1, 5, 4)
    mask[1:4, 2:5] = 1
    moved = transform_raster(mask, op)
    rows = np.flatnonzero(moved.any(axis=1))
    cols = np.flatnonzero(moved.any(axis=0))
    assert transform_bbox(b, op, w, h) == box(cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)


def test_rot90_point_convention():
    # np.rot90 is counter-clockwise: the top-right pixel ends up top-left
    img = np.zeros((2, 3), int)
    img[0, 2] = 1
    assert transform_raster(img, AugmentOp.ROT90)[0, 0] == 1
    assert transform_bbox(box(2, 0, 3, 1), AugmentOp.ROT90, 3, 2) == box(0, 0, 1, 1)


def test_transform_bbox_rejects_outside_box():
    with pytest.raises(ValueError):
        transform_bbox(box(0, 0, 5, 5), FH, 4, 4)


def test_ops_for_rarity():
    assert ops_for_rarity(10, 10) == 0
    assert ops_for_rarity(1, 10) == 5  # round(4.5) half up
    assert ops_for_rarity(5, 10) == 3  # round(2.5) half up
    assert ops_for_rarity(0, 10) == 5
    assert ops_for_rarity(0, 0) == 0


def _records(cats_per_record):
    return [
        EatingOccasionRecord(f"r{i}", f"{i}.png", tuple(ann(0, 0, 2, 2, c) for c in cats))
        for i, cats in enumerate(cats_per_record)
    ]


def test_plan_balance_favours_rare_categories():
    recs = _records([["rice"]] * 9 + [["steak"], ["rice", "steak"], []])
    counts = category_image_counts(recs)
    assert counts == Counter({"rice": 10, "steak": 2})
    plan = plan_balance(recs, seed=0)
    assert [len(p) for p in plan] == [0] * 9 + [4, 4, 0]
    assert all(len(set(p)) == len(p) for p in plan)
    assert plan == plan_balance(recs, seed=0)


def test_balanced_categories_get_no_ops():
    recs = _records([["rice"], ["steak"], ["rice", "steak"]])
    assert all(p == [] for p in plan_balance(recs, seed=1))


def test_augment_record_and_balance_on_disk(tiny_dataset, tmp_path):
    m = tiny_dataset
    rec = m.records[0]
    new = augment_record(rec, FH, m, tmp_path)
    assert new.image_id == f"{rec.image_id}#flip_h"
    img = load_manifest(save_manifest(replace(m, records=(new,), root=tmp_path), tmp_path / "one.json"))
    assert np.array_equal(img.load_image(img.records[0]), m.load_image(rec)[:, ::-1])

    out = balance_augment(m, seed=0, out_dir=tmp_path / "aug")
    plan = plan_balance(m.subset("train").records, seed=0)
    assert len(out) == len(m) + sum(len(p) for p in plan)
    assert {r.image_id for r in m.records} <= {r.image_id for r in out.records}
    reloaded = load_manifest(save_manifest(out, tmp_path / "aug" / "manifest.json"))
    assert reloaded == out
    for r in reloaded.records:
        emap = reloaded.load_energy_map(r)
        assert reloaded.load_image(r).shape[:2] == emap.shape
        for a in r.annotations:
            assert integrate_energy(crop_energy_map(emap, a.bbox)) == a.kcal
