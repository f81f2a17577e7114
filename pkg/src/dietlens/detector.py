"""Class-agnostic two-stage food localizer (region proposals + box head)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torchvision.models.detection import FasterRCNN
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.models.detection.faster_rcnn import FastRCNNPredictor, TwoMLPHead
from torchvision.ops import MultiScaleRoIAlign

from dietlens.data import BoundingBox, DatasetManifest
from dietlens.nets import ResNetSmall, check_finite, load_checkpoint, save_checkpoint, seed_everything

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    bbox: BoundingBox
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression; survivors come back in descending score."""
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if not detections:
        return []
    boxes = np.array([d.bbox.to_list() for d in detections], dtype=np.float64)
    scores = np.array([d.score for d in detections])
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= iou_threshold]
    return [detections[i] for i in keep]


@dataclass
class DetectorHyper:
    epochs: int = 12
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1)
    anchor_sizes: tuple[int, ...] = (16, 28, 44)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    input_size: int = 128
    min_input_size: int = 32
    score_threshold: float = 0.5
    nms_iou_threshold: float = 0.5
    max_detections: int = 50

    def __post_init__(self) -> None:
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        self.anchor_sizes = tuple(self.anchor_sizes)
        self.aspect_ratios = tuple(self.aspect_ratios)
        for name in ("score_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


def build_detector_net(hyper: DetectorHyper) -> FasterRCNN:
    backbone = ResNetSmall(3, hyper.widths, hyper.blocks, stem_stride=2)
    anchors = AnchorGenerator(sizes=(hyper.anchor_sizes,), aspect_ratios=(hyper.aspect_ratios,))
    roi_pool = MultiScaleRoIAlign(featmap_names=["0"], output_size=7, sampling_ratio=2)
    rep = 256
    net = FasterRCNN(
        _SingleMap(backbone),
        num_classes=None,
        min_size=hyper.input_size,
        max_size=hyper.input_size,
        image_mean=[0.5, 0.5, 0.5],
        image_std=[0.25, 0.25, 0.25],
        rpn_anchor_generator=anchors,
        rpn_pre_nms_top_n_train=600,
        rpn_post_nms_top_n_train=128,
        rpn_pre_nms_top_n_test=300,
        rpn_post_nms_top_n_test=64,
        rpn_batch_size_per_image=128,
        box_roi_pool=roi_pool,
        box_head=TwoMLPHead(backbone.out_channels * 49, rep),
        box_predictor=FastRCNNPredictor(rep, 2),  # background + food
        box_batch_size_per_image=64,
        box_score_thresh=hyper.score_threshold,
        # suppression happens in detect() through nms() so it is testable on its own
        box_nms_thresh=1.0,
        box_detections_per_img=hyper.max_detections,
    )
    return net


class _SingleMap(nn.Module):
    def __init__(self, trunk: ResNetSmall):
        super().__init__()
        self.trunk = trunk
        self.out_channels = trunk.out_channels

    def forward(self, x):
        return self.trunk(x)


@dataclass
class DetectorModel:
    net: FasterRCNN
    hyper: DetectorHyper
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def score_threshold(self) -> float:
        return self.hyper.score_threshold

    @property
    def nms_iou_threshold(self) -> float:
        return self.hyper.nms_iou_threshold

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, "detector", asdict(self.hyper), self.seed, self.net.state_dict(), history=self.history)

    @classmethod
    def load(cls, path: str | Path) -> DetectorModel:
        header, state = load_checkpoint(path, "detector")
        hyper = DetectorHyper(**header["hyper"])
        net = build_detector_net(hyper)
        net.load_state_dict(state)
        net.eval()
        return cls(net, hyper, header["seed"], header["history"])


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0


def _targets(manifest: DatasetManifest):
    images, targets = [], []
    for rec in manifest.records:
        images.append(_to_tensor(manifest.load_image(rec)))
        boxes = torch.tensor([a.bbox.to_list() for a in rec.annotations], dtype=torch.float32).reshape(-1, 4)
        targets.append({"boxes": boxes, "labels": torch.ones(len(boxes), dtype=torch.int64)})
    return images, targets


def _eval_batchnorm(net: nn.Module) -> None:
    for m in net.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()


def train_detector(manifest: DatasetManifest, hyper: DetectorHyper | None = None, seed: int = 0) -> DetectorModel:
    """Train on the manifest's train split; val loss is logged when a val split exists.

    All foods collapse to a single foreground class.
    """
    hyper = hyper or DetectorHyper()
    train = manifest.subset("train")
    if not train.records:
        raise ValueError("detector training needs a nonempty train split")
    val = manifest.subset("val")

    gen = seed_everything(seed)
    net = build_detector_net(hyper)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=hyper.lr, momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    steps_per_epoch = -(-len(train.records) // hyper.batch_size)
    total = max(1, hyper.epochs * steps_per_epoch)
    warmup = min(50, total // 4)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / max(1, warmup)) * 0.5 * (1 + np.cos(np.pi * min(s, total) / total))
    )
    images, targets = _targets(train)
    val_images, val_targets = _targets(val) if val.records else ([], [])

    history = []
    for epoch in range(hyper.epochs):
        net.train()
        order = torch.randperm(len(images), generator=gen).tolist()
        running, steps = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            losses = net([images[i] for i in idx], [targets[i] for i in idx])
            loss = sum(losses.values())
            check_finite(loss, "detector", epoch, steps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item()
            steps += 1
        row = {"epoch": epoch, "train_loss": running / steps}
        if val_images:
            row["val_loss"] = _val_loss(net, val_images, val_targets, hyper.batch_size)
        history.append(row)
        log.info("detector epoch %d %s", epoch, row)
    net.eval()
    return DetectorModel(net, hyper, seed, history)


@torch.no_grad()
def _val_loss(net, images, targets, batch_size) -> float:
    with torch.random.fork_rng():
        torch.manual_seed(0)
        net.train()
        _eval_batchnorm(net)
        total, n = 0.0, 0
        for start in range(0, len(images), batch_size):
            losses = net(images[start : start + batch_size], targets[start : start + batch_size])
            total += float(sum(losses.values()))
            n += 1
    net.eval()
    return total / n


@torch.no_grad()
def detect(model: DetectorModel, image: np.ndarray) -> list[Detection]:
    """Scored boxes above the score threshold, clipped, suppressed, best first."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if min(h, w) < model.hyper.min_input_size:
        raise ValueError(f"image {w}x{h} smaller than minimum input size {model.hyper.min_input_size}")
    model.net.eval()
    out = model.net([_to_tensor(image)])[0]
    dets = []
    for box, score in zip(out["boxes"].tolist(), out["scores"].tolist()):
        if score < model.score_threshold:
            continue
        try:
            bbox = BoundingBox(*box).clip(w, h)
        except ValueError:
            continue
        if bbox is not None:
            dets.append(Detection(bbox, min(1.0, max(0.0, float(score)))))
    return nms(dets, model.nms_iou_threshold)
