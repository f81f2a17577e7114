"""Food-category classifier for single-food crops, trained with cross-entropy."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from dietlens.augment import ALL_OPS, transform_raster
from dietlens.data import DatasetManifest, crop_region
from dietlens.nets import ResNetHead, check_finite, load_checkpoint, resize_batch, save_checkpoint, seed_everything

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, onehot) -> float:
    """``-sum_i y_i log p_i`` for one example, with ``p`` clamped to ``>= 1e-12``."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"dimension mismatch: probs {p.shape} vs onehot {y.shape}")
    if abs(p.sum() - 1.0) > 1e-6 or (p < 0).any():
        raise ValueError(f"probs must be a probability vector (sum={p.sum()})")
    if not (np.isin(y, (0.0, 1.0)).all() and y.sum() == 1):
        raise ValueError("onehot must contain exactly one 1")
    return float(-(y * np.log(np.maximum(p, LOG_CLAMP))).sum())


def cross_entropy_grad(logits, onehot) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(logits), onehot)`` with respect to the logits."""
    return softmax(logits) - np.asarray(onehot, dtype=np.float64)


@dataclass
class ClassifierHyper:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    input_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1)
    random_ops: bool = True  # apply a random rotation/flip to each crop per epoch

    def __post_init__(self) -> None:
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)


@dataclass
class ClassifierModel:
    net: ResNetHead
    label_set: tuple[str, ...]
    hyper: ClassifierHyper
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def input_size(self) -> int:
        return self.hyper.input_size

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(
            path,
            "classifier",
            asdict(self.hyper),
            self.seed,
            self.net.state_dict(),
            label_set=list(self.label_set),
            history=self.history,
        )

    @classmethod
    def load(cls, path: str | Path) -> ClassifierModel:
        header, state = load_checkpoint(path, "classifier")
        hyper = ClassifierHyper(**header["hyper"])
        label_set = tuple(header["label_set"])
        net = ResNetHead(3, len(label_set), hyper.widths, hyper.blocks)
        net.load_state_dict(state)
        net.eval()
        return cls(net, label_set, hyper, header["seed"], header["history"])


def crop_tensor(crop: np.ndarray, size: int) -> torch.Tensor:
    """HxWx3 uint8 crop -> 3 x size x size float in [-1, 1] (bilinear)."""
    if crop.ndim != 3 or crop.shape[0] == 0 or crop.shape[1] == 0:
        raise ValueError(f"zero-area or malformed crop of shape {crop.shape}")
    t = torch.from_numpy(np.ascontiguousarray(crop)).permute(2, 0, 1).float()[None] / 127.5 - 1.0
    return resize_batch(t, size)[0]


def crops_from_manifest(manifest: DatasetManifest) -> list[tuple[np.ndarray, str]]:
    """Groundtruth-box crops of every annotation."""
    out = []
    for rec in manifest.records:
        img = manifest.load_image(rec)
        out.extend((crop_region(img, a.bbox), a.category) for a in rec.annotations)
    return out


def _stack(crops, label_index, size):
    x = torch.stack([crop_tensor(c, size) for c, _ in crops])
    y = torch.tensor([label_index[lbl] for _, lbl in crops], dtype=torch.int64)
    return x, y


def train_classifier(
    crops: list[tuple[np.ndarray, str]],
    label_set,
    hyper: ClassifierHyper | None = None,
    seed: int = 0,
    val_crops: list[tuple[np.ndarray, str]] | None = None,
) -> ClassifierModel:
    hyper = hyper or ClassifierHyper()
    label_set = tuple(label_set)
    if not crops:
        raise ValueError("classifier training needs at least one crop")
    present = {lbl for _, lbl in crops}
    unknown = present - set(label_set)
    if unknown:
        raise ValueError(f"crops carry labels outside the label set: {sorted(unknown)}")
    missing = [c for c in label_set if c not in present]
    if missing:
        raise ValueError(f"categories absent from the train split: {missing}")
    index = {c: i for i, c in enumerate(label_set)}

    gen = seed_everything(seed)
    rng = np.random.default_rng(seed)
    net = ResNetHead(3, len(label_set), hyper.widths, hyper.blocks)
    opt = torch.optim.AdamW(net.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    steps = hyper.epochs * math.ceil(len(crops) / hyper.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=hyper.lr, total_steps=max(steps, 1), pct_start=0.2)

    variants = [crops]
    if hyper.random_ops:
        variants += [[(transform_raster(c, op), lbl) for c, lbl in crops] for op in ALL_OPS]
    stacked = [_stack(v, index, hyper.input_size) for v in variants]
    x_val = y_val = None
    if val_crops:
        x_val, y_val = _stack(val_crops, index, hyper.input_size)

    history = []
    n = len(crops)
    for epoch in range(hyper.epochs):
        net.train()
        order = torch.randperm(n, generator=gen)
        pick = torch.from_numpy(rng.integers(len(stacked), size=n))
        total, count = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            x = torch.stack([stacked[int(pick[i])][0][i] for i in idx])
            y = stacked[0][1][idx]
            loss = F.cross_entropy(net(x), y)
            check_finite(loss, "classifier", epoch, count)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "train_loss": total / count}
        if x_val is not None:
            row["val_accuracy"] = _accuracy(net, x_val, y_val)
        history.append(row)
        log.info("classifier epoch %d %s", epoch, row)
    net.eval()
    return ClassifierModel(net, label_set, hyper, seed, history)


@torch.no_grad()
def _accuracy(net, x, y) -> float:
    net.eval()
    pred = torch.cat([net(x[i : i + 256]).argmax(1) for i in range(0, len(x), 256)])
    return float((pred == y).float().mean())


@torch.no_grad()
def predict_proba(model: ClassifierModel, crop: np.ndarray) -> np.ndarray:
    model.net.eval()
    logits = model.net(crop_tensor(crop, model.input_size)[None])[0]
    return torch.softmax(logits.double(), dim=0).numpy()


def classify(model: ClassifierModel, crop: np.ndarray) -> tuple[str, float]:
    """Most probable category and its softmax probability."""
    probs = predict_proba(model, crop)
    k = int(np.argmax(probs))
    return model.label_set[k], float(probs[k])


def accuracy(model: ClassifierModel, crops) -> float:
    if not crops:
        raise ValueError("no crops to score")
    return float(np.mean([classify(model, c)[0] == lbl for c, lbl in crops]))
