"""Full image-to-portions dataflow and its evaluation.

detect -> classify each crop -> generate the scene's energy map once ->
crop the map per box -> fuse RGB + map -> regress kcal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from dietlens.classifier import ClassifierModel, classify
from dietlens.data import BoundingBox, DatasetManifest, FoodAnnotation, crop_region, write_image
from dietlens.detector import DetectorModel, detect
from dietlens.energy import EnergyMap, GeneratorModel, crop_energy_map, generate_energy_map
from dietlens.metrics import COCO_THRESHOLDS, EvalReport, Prediction, build_report, error_percentage, iou, mae
from dietlens.portion import RegressorModel, estimate_many, estimate_portion, fuse_rgbd

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"{stage}: {cause}")


@dataclass
class OccasionItem:
    bbox: BoundingBox
    category: str
    confidence: float  # classifier softmax probability
    score: float  # detector objectness
    kcal: float
    gt_kcal: float | None = None

    def to_json(self) -> dict:
        return {
            "bbox": self.bbox.to_list(),
            "category": self.category,
            "confidence": self.confidence,
            "score": self.score,
            "kcal": self.kcal,
            "gt_kcal": self.gt_kcal,
        }

    @classmethod
    def from_json(cls, d: dict) -> OccasionItem:
        return cls(BoundingBox.from_list(d["bbox"]), d["category"], d["confidence"], d["score"], d["kcal"], d.get("gt_kcal"))


@dataclass
class OccasionResult:
    image_id: str
    items: list[OccasionItem] = field(default_factory=list)
    gt_total: float | None = None

    @property
    def total_kcal(self) -> float:
        return float(sum(i.kcal for i in self.items))

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "items": [i.to_json() for i in self.items],
            "total_kcal": self.total_kcal,
            "gt_total_kcal": self.gt_total,
        }

    @classmethod
    def from_json(cls, d: dict) -> OccasionResult:
        return cls(d["image_id"], [OccasionItem.from_json(i) for i in d["items"]], d.get("gt_total_kcal"))


@dataclass
class PipelineModels:
    detector: DetectorModel
    classifier: ClassifierModel
    generator: GeneratorModel
    regressor: RegressorModel

    @property
    def map_max(self) -> float:
        return self.regressor.map_max

    @classmethod
    def load(cls, detector, classifier, generator, regressor) -> PipelineModels:
        models = []
        for stage, loader, path in (
            ("detector", DetectorModel.load, detector),
            ("classifier", ClassifierModel.load, classifier),
            ("energy-gan", GeneratorModel.load, generator),
            ("regressor", RegressorModel.load, regressor),
        ):
            try:
                models.append(loader(path))
            except Exception as exc:
                raise StageError(f"load {stage}", exc) from exc
        return cls(*models)


def assign_groundtruth(boxes: list[BoundingBox], gts, iou_threshold: float = 0.5) -> list[int | None]:
    """Greedy one-to-one box assignment (boxes in priority order), category-blind."""
    taken = set()
    out = []
    for b in boxes:
        best, best_iou = None, iou_threshold
        for j, g in enumerate(gts):
            if j in taken:
                continue
            v = iou(b, g.bbox)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken.add(best)
        out.append(best)
    return out


def run_end_to_end(
    models: PipelineModels,
    image: np.ndarray,
    image_id: str = "image",
    groundtruth: list[FoodAnnotation] | None = None,
    energy_map: EnergyMap | None = None,
) -> OccasionResult:
    """Localize, classify and size every food item in ``image``.

    ``energy_map`` lets callers reuse an already generated map; otherwise it
    is generated once here and shared by all crops.
    """
    try:
        dets = detect(models.detector, image)
    except Exception as exc:
        raise StageError("detect", exc) from exc
    if not dets:
        gt_total = sum(a.kcal for a in groundtruth) if groundtruth is not None else None
        return OccasionResult(image_id, [], gt_total)
    try:
        emap = energy_map if energy_map is not None else generate_energy_map(models.generator, image)
    except Exception as exc:
        raise StageError("generate-energy-map", exc) from exc

    items = []
    for d in dets:
        crop = crop_region(image, d.bbox)
        try:
            category, conf = classify(models.classifier, crop)
        except Exception as exc:
            raise StageError("classify", exc) from exc
        try:
            fused = fuse_rgbd(crop, crop_energy_map(emap, d.bbox), models.map_max)
            kcal = estimate_portion(models.regressor, fused)
        except Exception as exc:
            raise StageError("estimate-portion", exc) from exc
        items.append(OccasionItem(d.bbox, category, conf, d.score, kcal))

    gt_total = None
    if groundtruth is not None:
        gt_total = float(sum(a.kcal for a in groundtruth))
        for item, j in zip(items, assign_groundtruth([i.bbox for i in items], groundtruth)):
            if j is not None:
                item.gt_kcal = groundtruth[j].kcal
    return OccasionResult(image_id, items, gt_total)


def run_manifest(models: PipelineModels, manifest: DatasetManifest) -> list[OccasionResult]:
    return [
        run_end_to_end(models, manifest.load_image(r), r.image_id, list(r.annotations))
        for r in manifest.records
    ]


def evaluate_results(
    results: list[OccasionResult], manifest: DatasetManifest, thresholds=None, match_iou: float = 0.5, extra=None
) -> EvalReport:
    """mAP over labelled boxes plus per-item MAE and per-occasion EP.

    Ranking score for mAP is detector score times classifier confidence.
    MAE pairs each groundtruth item with the prediction assigned to it
    (category-blind, IoU > ``match_iou``); unmatched groundtruth is counted
    in ``extra['unmatched_gt']`` and left out of the MAE.
    """
    thresholds = thresholds or COCO_THRESHOLDS
    images, item_pairs, occasions = [], [], []
    unmatched = 0
    for res in results:
        gts = list(manifest.record(res.image_id).annotations)
        preds = [Prediction(i.bbox, i.category, i.score * i.confidence) for i in res.items]
        images.append((preds, gts))
        ranked = sorted(res.items, key=lambda i: -i.score)
        assigned = assign_groundtruth([i.bbox for i in ranked], gts, match_iou)
        by_gt = {j: item for item, j in zip(ranked, assigned) if j is not None}
        for j, g in enumerate(gts):
            if j in by_gt:
                item_pairs.append((by_gt[j].kcal, g.kcal))
            else:
                unmatched += 1
        occasions.append((res.image_id, res.total_kcal, float(sum(g.kcal for g in gts))))
    extra = dict(extra or {})
    extra["unmatched_gt"] = unmatched
    return build_report(images, item_pairs, occasions, thresholds, extra)


def compare_regressors(
    models: PipelineModels,
    regressors: dict[str, RegressorModel],
    results: list[OccasionResult],
    manifest: DatasetManifest,
    match_iou: float = 0.5,
) -> dict[str, dict]:
    """Re-size the same detections with alternative regressors.

    Each method sees identical boxes and generated maps, so only the
    regressor input differs. Returns per method ``mae``, ``ep`` and the
    per-occasion ``(image_id, gt_total, pred_total)`` list.
    """
    out = {}
    fused_per_image = []
    for res in results:
        if not res.items:
            fused_per_image.append([])
            continue
        image = manifest.load_image(manifest.record(res.image_id))
        emap = generate_energy_map(models.generator, image)
        fused_per_image.append(
            [
                (item, crop_region(image, item.bbox), crop_energy_map(emap, item.bbox))
                for item in res.items
            ]
        )
    for name, reg in regressors.items():
        item_pairs, occasions = [], []
        for res, fused in zip(results, fused_per_image):
            gts = list(manifest.record(res.image_id).annotations)
            imgs = [fuse_rgbd(crop, mcrop, reg.map_max) for _, crop, mcrop in fused]
            kcals = estimate_many(reg, imgs)
            items = [item for item, _, _ in fused]
            order = sorted(range(len(items)), key=lambda k: -items[k].score)
            assigned = assign_groundtruth([items[k].bbox for k in order], gts, match_iou)
            for k, j in zip(order, assigned):
                if j is not None:
                    item_pairs.append((float(kcals[k]), gts[j].kcal))
            occasions.append((res.image_id, float(sum(g.kcal for g in gts)), float(kcals.sum())))
        gt_tot = [g for _, g, _ in occasions]
        out[name] = {
            "mae": mae([p for p, _ in item_pairs], [g for _, g in item_pairs]) if item_pairs else None,
            "ep": error_percentage([p for _, _, p in occasions], gt_tot) if sum(gt_tot) > 0 else None,
            "occasions": occasions,
        }
    return out


def _font(size: int = 11):
    try:
        return ImageFont.load_default(size=size)
    except TypeError:  # Pillow < 10.1
        return ImageFont.load_default()


def item_label(item: OccasionItem) -> str:
    label = f"{item.category}: {item.kcal:.0f} kcal"
    if item.gt_kcal is not None:
        label += f" ({item.gt_kcal:.0f})"
    return label


def render_annotated(image: np.ndarray, result: OccasionResult, path: str | Path | None = None) -> np.ndarray:
    """Draw each box with ``category: X kcal (groundtruth)``; optionally save as PNG."""
    canvas = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB")
    if result.items:
        draw = ImageDraw.Draw(canvas)
        font = _font()
        for item in result.items:
            b = item.bbox
            draw.rectangle([b.x1, b.y1, b.x2 - 1, b.y2 - 1], outline=(255, 255, 0), width=1)
            text = item_label(item)
            tx, ty = b.x1 + 1, max(0.0, b.y1 - 12)
            left, top, right, bottom = draw.textbbox((tx, ty), text, font=font)
            draw.rectangle([left - 1, top - 1, right + 1, bottom + 1], fill=(0, 0, 0))
            draw.text((tx, ty), text, fill=(255, 255, 255), font=font)
    out = np.asarray(canvas).copy()
    if path is not None:
        write_image(path, out)
    return out
