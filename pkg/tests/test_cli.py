import csv
import json

import pytest
from click.testing import CliRunner

from conftest import TINY_CONFIG, invoke
from dietlens.cli import main
from dietlens.config import PipelineConfig, load_config


def test_config_round_trip_and_hash(tmp_path):
    cfg = PipelineConfig.from_json(TINY_CONFIG)
    again = PipelineConfig.from_json(json.loads(cfg.dumps()))
    assert again.to_json() == cfg.to_json()
    assert again.hash() == cfg.hash() and len(cfg.hash()) == 12
    cfg.seed += 1
    assert cfg.hash() != again.hash()
    assert load_config(None).seed == 0


@pytest.mark.parametrize(
    "doc",
    [{"bogus": 1}, {"regressor_map_source": "other"}, {"checkpoints": {"nope": "x.pt"}}, {"gan": {"lam": -1}}],
)
def test_config_rejects_bad_keys(doc):
    with pytest.raises((ValueError, TypeError)):
        PipelineConfig.from_json(doc)


def test_errors_are_one_line_and_nonzero(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["infer", "--config", str(tmp_path / "missing.json")])
    assert res.exit_code != 0
    lines = res.output.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: infer: ")

    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out_dir": str(tmp_path / "out")}))
    res = runner.invoke(main, ["train-detector", "--config", str(cfg)])
    assert res.exit_code != 0
    assert res.output.strip().splitlines()[-1].startswith("error: train-detector: ")
    log = (tmp_path / "out" / "run.log").read_text()
    assert "train-detector" in log and "failed" in log


def test_full_cli_flow(tiny_run, tmp_path):
    cfg_path, out = tiny_run
    cfg = load_config(cfg_path)
    for name in ("detector", "classifier", "energy-gan", "regressor", "regressor_rgb", "regressor_dist"):
        assert cfg.checkpoint(name).is_file()

    res = invoke(["infer", "--config", cfg_path])
    assert res.exit_code == 0, res.output
    first = (out / "infer" / "report.json").read_bytes()
    preds = json.loads((out / "infer" / "predictions.json").read_text())
    assert preds["config_hash"] == cfg.hash()
    assert len(list((out / "infer" / "annotated").glob("*.png"))) == len(preds["results"])
    assert invoke(["infer", "--config", cfg_path]).exit_code == 0
    assert (out / "infer" / "report.json").read_bytes() == first

    res = invoke(["evaluate", "--config", cfg_path])
    assert res.exit_code == 0, res.output
    report = json.loads((out / "eval" / "report.json").read_text())
    assert set(report["extra"]["methods"]) == {"distribution only", "RGB only"}
    assert len(report["mAP_per_threshold"]) == 10
    rows = list(csv.reader((out / "eval" / "occasions.csv").open()))
    assert rows[0][:3] == ["image_id", "gt_kcal", "pred_kcal"] and len(rows) == len(preds["results"]) + 1
    assert (out / "eval" / "scatter.png").is_file()
    assert "| method | MAE (kcal) | EP (%) |" in (out / "eval" / "report.txt").read_text()

    res = invoke(["evaluate", "--config", cfg_path, "--iou-thresholds", "0.5,0.75"])
    assert res.exit_code == 0
    assert set(json.loads((out / "eval" / "report.json").read_text())["mAP_per_threshold"]) == {"0.50", "0.75"}

    assert invoke(["plot", "--config", cfg_path]).exit_code == 0
    assert (out / "figures" / "scatter.png").is_file()

    image = next((out / "data" / "images").glob("*.png"))
    res = invoke(["infer", "--config", cfg_path, "--image", image])
    assert res.exit_code == 0 and (out / "infer" / f"{image.stem}.json").is_file()

    hashes = {line.split("config_hash=")[1].split()[0] for line in (out / "run.log").read_text().splitlines()}
    assert cfg.hash() in hashes


def test_overrides(tiny_run, tmp_path):
    cfg_path, out = tiny_run
    manifest = out / "data" / "manifest.json"
    res = invoke(["augment", "--config", cfg_path, "--out", tmp_path / "o", "--seed", 9, "--manifest", manifest])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "o" / "augmented" / "manifest.json").is_file()
    assert "seed=9" in (tmp_path / "o" / "run.log").read_text()

    res = invoke(["infer", "--config", cfg_path, "--split", "test", "--out", tmp_path / "o"])
    assert res.exit_code != 0  # no checkpoints under the new out dir
