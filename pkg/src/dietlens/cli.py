"""``dietlens`` command line: every pipeline stage driven by one JSON config."""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import sys
import time
from pathlib import Path

import click

from dietlens.config import PipelineConfig, load_config

log = logging.getLogger("dietlens")


def _fail(command: str, exc: BaseException) -> None:
    reason = " ".join(str(exc).split()) or type(exc).__name__
    click.echo(f"error: {command}: {type(exc).__name__}: {reason}", err=True)
    sys.exit(1)


def common_options(fn):
    """``--config/--seed/--out`` on every command; failures become one stderr line and exit 1."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON run config.")
    @click.option("--seed", type=int, default=None, help="Override the config seed.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Override the output dir.")
    @click.option("-v", "--verbose", is_flag=True, help="Log training progress.")
    @functools.wraps(fn)
    def wrapper(config_path, seed, out_dir, verbose, **kwargs):
        command = click.get_current_context().info_name
        logging.basicConfig(
            level=logging.INFO if verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        try:
            cfg = load_config(config_path)
            if seed is not None:
                cfg.seed = seed
            if out_dir is not None:
                cfg.out_dir = out_dir
            fn(cfg, **kwargs)
            _run_log(cfg, command, "ok")
        except SystemExit:
            raise
        except Exception as exc:  # noqa: BLE001 - reported as a single line
            try:
                _run_log(cfg, command, f"failed: {type(exc).__name__}")
            except Exception:  # noqa: BLE001
                pass
            _fail(command, exc)

    return wrapper


def _run_log(cfg: PipelineConfig, command: str, status: str) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(cfg.out / "run.log", "a") as fh:
        fh.write(f"{stamp} {command} config_hash={cfg.hash()} seed={cfg.seed} {status}\n")


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _fmt(v, digits: int = 2) -> str:
    return "n/a" if v is None else f"{v:.{digits}f}"


def _manifest(path):
    from dietlens.data import load_manifest

    return load_manifest(path)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Food localization, classification and portion estimation pipeline."""


@main.command("generate-synthetic")
@common_options
@click.option("--n", "n", type=int, default=None, help="Number of scenes (default from config).")
def generate_synthetic(cfg: PipelineConfig, n):
    from dietlens.data import save_manifest, split_dataset
    from dietlens.synthetic import generate_dataset

    n = n or cfg.synthetic.n
    out = cfg.manifest_path.parent
    manifest = generate_dataset(n, cfg.scene, cfg.seed, out, cfg.manifest_path.name)
    manifest = split_dataset(manifest, cfg.synthetic.val_frac, cfg.synthetic.test_frac, cfg.seed)
    save_manifest(manifest, cfg.manifest_path)
    counts = {s: len(manifest.subset(s)) for s in ("train", "val", "test")}
    click.echo(f"{cfg.manifest_path}\t" + "\t".join(f"{k}={v}" for k, v in counts.items()))


@main.command("augment")
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), default=None)
def augment_cmd(cfg: PipelineConfig, manifest_path):
    from dietlens.augment import balance_augment
    from dietlens.data import save_manifest

    manifest = _manifest(manifest_path or cfg.manifest_path)
    out = cfg.out / "augmented"
    aug = balance_augment(manifest, cfg.seed, out)
    path = save_manifest(aug, out / "manifest.json")
    added = len(aug) - len(manifest)
    click.echo(f"{path}\trecords={len(aug)}\tadded={added}")


def _stage_manifest(cfg, manifest_path):
    return _manifest(manifest_path or cfg.train_manifest_path)


@main.command("train-detector")
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), default=None)
def train_detector_cmd(cfg: PipelineConfig, manifest_path):
    from dietlens.detector import train_detector
    from dietlens.plotting import plot_history

    model = train_detector(_stage_manifest(cfg, manifest_path), cfg.detector, cfg.seed)
    path = model.save(cfg.checkpoint("detector"))
    plot_history(model.history, ["train_loss", "val_loss"], cfg.out / "figures" / "detector_loss.png", "detector")
    last = model.history[-1]
    click.echo(f"{path}\ttrain_loss={last['train_loss']:.4f}\tval_loss={last.get('val_loss', float('nan')):.4f}")


@main.command("train-classifier")
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), default=None)
def train_classifier_cmd(cfg: PipelineConfig, manifest_path):
    from dietlens.classifier import crops_from_manifest, train_classifier
    from dietlens.plotting import plot_history

    manifest = _stage_manifest(cfg, manifest_path)
    train = crops_from_manifest(manifest.subset("train"))
    val = crops_from_manifest(manifest.subset("val"))
    model = train_classifier(train, manifest.label_set, cfg.classifier, cfg.seed, val_crops=val or None)
    path = model.save(cfg.checkpoint("classifier"))
    plot_history(model.history, ["train_loss", "val_accuracy"], cfg.out / "figures" / "classifier.png", "classifier")
    last = model.history[-1]
    click.echo(f"{path}\ttrain_loss={last['train_loss']:.4f}\tval_accuracy={last.get('val_accuracy', float('nan')):.4f}")


@main.command("train-energy-gan")
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), default=None)
@click.option("--lambda", "lam", type=float, default=None, help="L1 reconstruction weight.")
def train_energy_gan_cmd(cfg: PipelineConfig, manifest_path, lam):
    from dietlens.energy import map_l1_error, train_energy_gan
    from dietlens.plotting import plot_history

    if lam is not None:
        cfg.gan = dataclasses.replace(cfg.gan, lam=lam)
    manifest = _stage_manifest(cfg, manifest_path)
    model = train_energy_gan(manifest.subset("train"), cfg.gan, cfg.seed)
    path = model.save(cfg.checkpoint("energy-gan"))
    plot_history(model.history, ["d_loss", "g_adv", "l1"], cfg.out / "figures" / "energy_gan.png", "energy GAN")
    line = f"{path}\td_loss={model.history[-1]['d_loss']:.4f}\tg_loss={model.history[-1]['g_loss']:.4f}"
    val = manifest.subset("val")
    if val.records:
        err, ref = map_l1_error(model, val)
        line += f"\tval_l1={err:.4f}\tval_mean={ref:.4f}"
    click.echo(line)


@main.command("train-regressor")
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False), default=None)
@click.option("--channels", type=click.Choice(["rgbd", "rgb", "dist"]), default=None)
@click.option("--map-source", type=click.Choice(["generated", "groundtruth"]), default=None)
def train_regressor_cmd(cfg: PipelineConfig, manifest_path, channels, map_source):
    from dietlens.energy import GeneratorModel
    from dietlens.plotting import plot_history
    from dietlens.portion import pairs_from_manifest, train_regressor

    hyper = dataclasses.replace(cfg.regressor, channels=channels) if channels else cfg.regressor
    source = map_source or cfg.regressor_map_source
    manifest = _stage_manifest(cfg, manifest_path)
    if source == "generated":
        gen = GeneratorModel.load(cfg.checkpoint("energy-gan"))
        map_max = gen.map_max
    else:
        gen, map_max = None, cfg.gan.map_max or cfg.scene.map_max
    train = pairs_from_manifest(manifest.subset("train"), map_max, gen)
    val = pairs_from_manifest(manifest.subset("val"), map_max, gen)
    model = train_regressor(train, hyper, cfg.seed, val_pairs=val or None)
    key = "regressor" if hyper.channels == "rgbd" else f"regressor_{hyper.channels}"
    path = model.save(cfg.checkpoint(key))
    plot_history(model.history, ["train_mae", "val_mae"], cfg.out / "figures" / f"{key}.png", key)
    last = model.history[-1]
    click.echo(f"{path}\ttrain_mae={last['train_mae']:.3f}\tval_mae={last.get('val_mae', float('nan')):.3f}")


def _load_models(cfg):
    from dietlens.pipeline import PipelineModels

    return PipelineModels.load(
        cfg.checkpoint("detector"), cfg.checkpoint("classifier"), cfg.checkpoint("energy-gan"), cfg.checkpoint("regressor")
    )


@main.command("infer")
@common_options
@click.option("--split", default=None, help="Manifest split to run on (default from config).")
@click.option("--image", "image_path", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Run on one image instead of a manifest split.")
@click.option("--no-render", is_flag=True, help="Skip annotated PNGs.")
def infer_cmd(cfg: PipelineConfig, split, image_path, no_render):
    from dietlens.data import read_image
    from dietlens.pipeline import evaluate_results, render_annotated, run_end_to_end

    models = _load_models(cfg)
    out = cfg.out / "infer"
    if image_path:
        image = read_image(image_path)
        res = run_end_to_end(models, image, Path(image_path).stem)
        _write_json(out / f"{res.image_id}.json", res.to_json())
        if not no_render:
            render_annotated(image, res, out / "annotated" / f"{res.image_id}.png")
        click.echo(f"{res.image_id}\titems={len(res.items)}\ttotal_kcal={res.total_kcal:.1f}")
        return

    split = split or cfg.evaluation.split
    manifest = _manifest(cfg.manifest_path).subset(split)
    if not manifest.records:
        raise ValueError(f"split {split!r} is empty")
    results = []
    for rec in manifest.records:
        image = manifest.load_image(rec)
        res = run_end_to_end(models, image, rec.image_id, list(rec.annotations))
        results.append(res)
        if not no_render:
            render_annotated(image, res, out / "annotated" / f"{rec.image_id}.png")
    _write_json(
        out / "predictions.json",
        {"config_hash": cfg.hash(), "split": split, "results": [r.to_json() for r in results]},
    )
    report = evaluate_results(
        results, manifest, cfg.evaluation.iou_thresholds, cfg.evaluation.match_iou,
        extra={"config_hash": cfg.hash(), "split": split},
    )
    (out / "report.json").write_text(report.dumps())
    click.echo(f"{out / 'report.json'}\tmAP@0.5={report.map_50:.4f}\tMAE={_fmt(report.mae)}\tEP={_fmt(report.error_percentage)}")


@main.command("evaluate")
@common_options
@click.option("--predictions", type=click.Path(dir_okay=False), default=None)
@click.option("--iou-thresholds", default=None, help="Comma-separated IoU thresholds.")
def evaluate_cmd(cfg: PipelineConfig, predictions, iou_thresholds):
    """Report tables (JSON, text, CSV) plus the per-occasion scatter plot."""
    from dietlens.pipeline import OccasionResult, compare_regressors, evaluate_results
    from dietlens.plotting import plot_scatter
    from dietlens.portion import RegressorModel

    thresholds = cfg.evaluation.iou_thresholds
    if iou_thresholds:
        thresholds = tuple(float(t) for t in iou_thresholds.split(","))
    pred_path = Path(predictions) if predictions else cfg.out / "infer" / "predictions.json"
    doc = json.loads(pred_path.read_text())
    results = [OccasionResult.from_json(r) for r in doc["results"]]
    manifest = _manifest(cfg.manifest_path)

    methods = {}
    for key, label in (("regressor_dist", "distribution only"), ("regressor_rgb", "RGB only")):
        if cfg.checkpoint(key).is_file():
            methods[label] = RegressorModel.load(cfg.checkpoint(key))
    comparison = {}
    if methods:
        comparison = compare_regressors(_load_models(cfg), methods, results, manifest, cfg.evaluation.match_iou)

    report = evaluate_results(
        results, manifest, thresholds, cfg.evaluation.match_iou,
        extra={
            "config_hash": cfg.hash(),
            "split": doc.get("split"),
            "methods": {k: {"MAE_kcal": v["mae"], "EP_percent": v["ep"]} for k, v in comparison.items()},
        },
    )
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.dumps())
    table = report.text_table()
    if comparison:
        table += "\n\n| method | MAE (kcal) | EP (%) |\n"
        table += f"| RGB-Distribution | {_fmt(report.mae)} | {_fmt(report.error_percentage)} |\n"
        for name, v in comparison.items():
            table += f"| {name} | {_fmt(v['mae'])} | {_fmt(v['ep'])} |\n"
    (out / "report.txt").write_text(table + "\n")

    with open(out / "occasions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "gt_kcal", "pred_kcal", *[f"pred_kcal_{k.replace(' ', '_')}" for k in comparison]])
        for k, (image_id, gt, pred) in enumerate(report.occasions):
            writer.writerow([image_id, f"{gt:.3f}", f"{pred:.3f}", *[f"{v['occasions'][k][2]:.3f}" for v in comparison.values()]])

    series = {"RGB-Distribution": [(g, p) for _, g, p in report.occasions]}
    for name, v in comparison.items():
        series[name] = [(g, p) for _, g, p in v["occasions"]]
    plot_scatter(series, out / "scatter.png")
    click.echo(table)


@main.command("plot")
@common_options
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
def plot_cmd(cfg: PipelineConfig, report_path):
    """Scatter plot from a saved report (single method)."""
    from dietlens.plotting import plot_scatter

    path = Path(report_path) if report_path else cfg.out / "eval" / "report.json"
    if not path.is_file():
        path = cfg.out / "infer" / "report.json"
    doc = json.loads(path.read_text())
    pairs = [(o["gt_kcal"], o["pred_kcal"]) for o in doc["occasions"]]
    target = cfg.out / "figures" / "scatter.png"
    plot_scatter({"RGB-Distribution": pairs}, target)
    click.echo(str(target))


if __name__ == "__main__":
    main()
