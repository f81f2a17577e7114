import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dietlens.energy import crop_energy_map, integrate_energy
from dietlens.synthetic import SceneConfig, generate_dataset, generate_scene, scene_seeds, shape_mask


def test_shape_masks():
    assert shape_mask("rectangle", 5, 3).all()
    disk = shape_mask("disk", 9, 9)
    assert disk[4, 4] and not disk[0, 0]
    tri = shape_mask("triangle", 8, 8)
    assert 0 < tri.sum() < 64
    with pytest.raises(ValueError):
        shape_mask("hexagon", 4, 4)


def test_scene_is_deterministic():
    cfg = SceneConfig()
    a, b = generate_scene(cfg, 42), generate_scene(cfg, 42)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.energy_map.raster, b.energy_map.raster)
    assert a.record == b.record
    assert not np.array_equal(a.image, generate_scene(cfg, 43).image)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_energy_conservation_per_item(seed):
    cfg = SceneConfig()
    scene = generate_scene(cfg, seed)
    rec = scene.record
    w, h = cfg.image_size
    assert lo_hi_ok(len(rec.annotations) + scene.dropped_items, cfg.items_per_scene)
    for a in rec.annotations:
        assert a.bbox.within(w, h)
        assert integrate_energy(crop_energy_map(scene.energy_map, a.bbox)) == a.kcal
    assert rec.total_kcal == sum(a.kcal for a in rec.annotations)
    # without occlusion the whole map is the sum of its items
    assert integrate_energy(scene.energy_map) == pytest.approx(rec.total_kcal, rel=1e-12)


def lo_hi_ok(n, bounds):
    return bounds[0] <= n <= bounds[1]


def test_many_categories_config():
    cfg = SceneConfig.with_categories(31)
    assert len(cfg.label_set) == 31 and len(set(cfg.label_set)) == 31
    scene = generate_scene(cfg, 0)
    assert all(a.category in cfg.label_set for a in scene.record.annotations)


def test_occlusion_allowed_keeps_boxes_valid():
    cfg = SceneConfig(occlusion_allowed=True, items_per_scene=(3, 5))
    for seed in range(10):
        scene = generate_scene(cfg, seed)
        for a, mask in zip(scene.record.annotations, scene.masks):
            assert a.bbox.within(*cfg.image_size)
            assert mask.any()


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        SceneConfig(size_range=(10, 500))
    with pytest.raises(ValueError):
        SceneConfig(energy_scale=0)
    cfg = SceneConfig(background={"texture": "checker"})
    assert SceneConfig.from_json(cfg.to_json()) == cfg
    generate_scene(cfg, 1)


def test_generate_dataset_writes_valid_manifest(tmp_path):
    m = generate_dataset(5, SceneConfig(image_size=(48, 48), size_range=(10, 16)), 3, tmp_path)
    assert len(m) == 5
    for rec in m.records:
        assert m.load_image(rec).shape == (48, 48, 3)
        emap = m.load_energy_map(rec)
        for a in rec.annotations:
            assert integrate_energy(crop_energy_map(emap, a.bbox)) == a.kcal
    assert scene_seeds(5, 3) == scene_seeds(5, 3)
