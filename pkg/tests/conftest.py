from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

sys.path.insert(0, str(Path(__file__).parent))

from dietlens.cli import main  # noqa: E402
from dietlens.data import BoundingBox, FoodAnnotation  # noqa: E402
from dietlens.synthetic import SceneConfig, generate_dataset  # noqa: E402

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def box(x1, y1, x2, y2) -> BoundingBox:
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def ann(x1, y1, x2, y2, category="rice", kcal=100.0) -> FoodAnnotation:
    return FoodAnnotation(box(x1, y1, x2, y2), category, kcal)


def random_box(rng: np.random.Generator, size: int = 24) -> BoundingBox:
    x1, y1 = rng.integers(0, size - 1, size=2)
    x2 = rng.integers(x1 + 1, size + 1)
    y2 = rng.integers(y1 + 1, size + 1)
    return box(x1, y1, x2, y2)


def invoke(args: list[str]):
    """Run the CLI in-process; returns the click Result."""
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


TINY_SCENE = SceneConfig(image_size=(64, 64), size_range=(12, 24), items_per_scene=(1, 3))

TINY_CONFIG = {
    "seed": 5,
    "scene": TINY_SCENE.to_json(),
    "synthetic": {"n": 12, "val_frac": 0.25, "test_frac": 0.0},
    "detector": {"epochs": 2, "batch_size": 4, "input_size": 64},
    "classifier": {"epochs": 1, "input_size": 32},
    "gan": {"epochs": 1, "depth": 2, "base": 8, "disc_base": 8},
    "regressor": {"epochs": 1, "input_size": 32},
}


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    return generate_dataset(10, TINY_SCENE, seed=11, out_dir=out)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Every CLI training stage on a tiny synthetic set; returns (config path, out dir)."""
    root = tmp_path_factory.mktemp("tiny_run")
    cfg = dict(TINY_CONFIG, out_dir=str(root / "run"))
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    for cmd in (
        ["generate-synthetic"],
        ["train-detector"],
        ["train-classifier"],
        ["train-energy-gan"],
        ["train-regressor"],
        ["train-regressor", "--channels", "rgb"],
        ["train-regressor", "--channels", "dist"],
    ):
        res = invoke([*cmd, "--config", cfg_path])
        assert res.exit_code == 0, res.output
    return cfg_path, root / "run"
