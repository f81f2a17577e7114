"""Detection and portion-size evaluation: IoU, matching, AP/mAP, MAE and error percentage."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from dietlens.data import BoundingBox, FoodAnnotation

COCO_THRESHOLDS = tuple((50 + 5 * k) / 100 for k in range(10))  # 0.50, 0.55, ..., 0.95
AGNOSTIC = "food"


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Prediction:
    """A scored, labelled box as consumed by the matcher."""

    bbox: BoundingBox
    category: str
    score: float


@dataclass
class MatchEntry:
    prediction: Prediction
    gt_index: int | None
    is_tp: bool


@dataclass
class MatchResult:
    """Greedy assignment of predictions to groundtruth for one image and threshold."""

    iou_threshold: float
    entries: dict[str, list[MatchEntry]] = field(default_factory=dict)
    n_gt: dict[str, int] = field(default_factory=dict)

    def counts(self, category: str | None = None) -> tuple[int, int, int]:
        cats = [category] if category is not None else sorted(set(self.entries) | set(self.n_gt))
        tp = fp = fn = 0
        for c in cats:
            ents = self.entries.get(c, [])
            t = sum(e.is_tp for e in ents)
            tp += t
            fp += len(ents) - t
            fn += self.n_gt.get(c, 0) - t
        return tp, fp, fn


def match_detections(preds, gts, iou_threshold: float) -> MatchResult:
    """Match ``preds`` (Prediction list) against ``gts`` (FoodAnnotation list).

    Predictions are visited by descending score (stable). A prediction is a
    TP when some unmatched groundtruth of the same category has IoU strictly
    above the threshold; the highest-IoU such groundtruth is taken, ties to
    the lowest index.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    result = MatchResult(iou_threshold)
    for g in gts:
        result.n_gt[g.category] = result.n_gt.get(g.category, 0) + 1
    matched = [False] * len(gts)
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    for i in order:
        p = preds[i]
        best, best_iou = None, iou_threshold
        for j, g in enumerate(gts):
            if matched[j] or g.category != p.category:
                continue
            v = iou(p.bbox, g.bbox)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None:
            matched[best] = True
        result.entries.setdefault(p.category, []).append(MatchEntry(p, best, best is not None))
    return result


def precision_recall(match: MatchResult) -> tuple[float, float]:
    tp, fp, fn = match.counts()
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def average_precision(ranked_tp, n_gt: int) -> float | None:
    """All-point interpolated AP for flags already sorted by descending score.

    Returns None when there is nothing to score (no groundtruth, no
    predictions) so callers can leave the category out of the mean.
    """
    flags = np.asarray(ranked_tp, dtype=bool)
    if n_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detections(images, iou_threshold: float, class_agnostic: bool = False) -> dict[str, float]:
    """Per-category AP over a dataset.

    ``images`` yields ``(predictions, groundtruths)`` per image. Categories
    with neither groundtruth nor predictions are absent from the result.
    """
    scored: dict[str, list[tuple[float, int, bool]]] = defaultdict(list)
    n_gt: dict[str, int] = defaultdict(int)
    seq = 0
    for preds, gts in images:
        if class_agnostic:
            preds = [Prediction(p.bbox, AGNOSTIC, p.score) for p in preds]
            gts = [FoodAnnotation(g.bbox, AGNOSTIC, g.kcal) for g in gts]
        m = match_detections(preds, gts, iou_threshold)
        for c, k in m.n_gt.items():
            n_gt[c] += k
        for c, ents in m.entries.items():
            for e in ents:
                scored[c].append((e.prediction.score, seq, e.is_tp))
                seq += 1
    aps = {}
    for c in sorted(set(scored) | set(n_gt)):
        # stable ranking: ties keep dataset order
        ranked = sorted(scored.get(c, []), key=lambda t: (-t[0], t[1]))
        ap = average_precision([t[2] for t in ranked], n_gt.get(c, 0))
        if ap is not None:
            aps[c] = ap
    return aps


def mean_average_precision(images, thresholds=COCO_THRESHOLDS, class_agnostic: bool = False):
    """mAP at each threshold and its mean over thresholds.

    Returns ``(per_threshold, averaged, per_category)`` where
    ``per_category[t][c]`` is the AP of category ``c`` at threshold ``t``.
    """
    images = list(images)
    if not images:
        raise ValueError("empty evaluation set")
    if not any(gts for _, gts in images):
        raise ValueError("no categories with groundtruth")
    per_t, per_cat = {}, {}
    for t in thresholds:
        aps = evaluate_detections(images, t, class_agnostic)
        per_cat[t] = aps
        per_t[t] = float(np.mean(list(aps.values()))) if aps else 0.0
    averaged = float(np.mean([per_t[t] for t in thresholds]))
    return per_t, averaged, per_cat


def mae(preds, gts) -> float:
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} groundtruths")
    if not preds:
        raise ValueError("mae of empty lists")
    return sum(abs(w - g) for w, g in zip(preds, gts)) / len(preds)


def error_percentage(preds, gts) -> float:
    """100 * sum|pred - gt| / sum gt."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} groundtruths")
    total = sum(gts)
    if total <= 0:
        raise ValueError("groundtruth total must be > 0")
    return 100.0 * sum(abs(w - g) for w, g in zip(preds, gts)) / total


def occasion_totals(per_item) -> list[tuple[str, float, float]]:
    """Sum ``(image_id, pred, gt)`` items per occasion, in first-seen order."""
    totals: dict[str, list[float]] = {}
    for image_id, pred, gt in per_item:
        acc = totals.setdefault(image_id, [0.0, 0.0])
        acc[0] += pred
        acc[1] += gt
    return [(k, v[0], v[1]) for k, v in totals.items()]


@dataclass
class EvalReport:
    map_50: float
    map_75: float
    map_50_95: float
    map_per_threshold: dict[float, float]
    ap_per_category: dict[str, float]  # at IoU 0.5
    mae: float | None
    error_percentage: float | None
    occasions: list[tuple[str, float, float]]  # (image_id, gt_total, pred_total)
    n_items: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mAP@0.5": self.map_50,
            "mAP@0.75": self.map_75,
            "mAP@[.5:.95]": self.map_50_95,
            "mAP_per_threshold": {f"{t:.2f}": v for t, v in sorted(self.map_per_threshold.items())},
            "AP_per_category@0.5": dict(sorted(self.ap_per_category.items())),
            "MAE_kcal": self.mae,
            "EP_percent": self.error_percentage,
            "n_items": self.n_items,
            "occasions": [
                {"image_id": i, "gt_kcal": g, "pred_kcal": p} for i, g, p in self.occasions
            ],
            **({"extra": self.extra} if self.extra else {}),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def text_table(self) -> str:
        lines = [
            "| mAP@.5 | mAP@.75 | mAP@[.5,.95] |",
            f"| {self.map_50:.4f} | {self.map_75:.4f} | {self.map_50_95:.4f} |",
            "",
        ]
        lines.append(f"MAE (per item): {self.mae:.2f} kcal" if self.mae is not None else "MAE (per item): n/a")
        lines.append(
            f"EP (per occasion): {self.error_percentage:.2f}%"
            if self.error_percentage is not None
            else "EP (per occasion): n/a"
        )
        return "\n".join(lines)


def build_report(images, item_pairs, occasions, thresholds=COCO_THRESHOLDS, extra: dict | None = None) -> EvalReport:
    """Assemble an :class:`EvalReport`.

    ``images`` as for :func:`mean_average_precision`; ``item_pairs`` holds
    ``(pred_kcal, gt_kcal)`` per groundtruth item (MAE); ``occasions`` holds
    ``(image_id, pred_total, gt_total)`` per image (EP and scatter data).
    """
    per_t, averaged, per_cat = mean_average_precision(images, thresholds)
    item_pairs = list(item_pairs)
    occasions = list(occasions)
    occ_gt = [g for _, _, g in occasions]
    ep = error_percentage([p for _, p, _ in occasions], occ_gt) if occasions and sum(occ_gt) > 0 else None
    return EvalReport(
        map_50=per_t.get(0.5, float("nan")),
        map_75=per_t.get(0.75, float("nan")),
        map_50_95=averaged,
        map_per_threshold=per_t,
        ap_per_category=per_cat.get(0.5, {}),
        mae=mae([p for p, _ in item_pairs], [g for _, g in item_pairs]) if item_pairs else None,
        error_percentage=ep,
        occasions=[(i, g, p) for i, p, g in occasions],
        n_items=len(item_pairs),
        extra=extra or {},
    )
