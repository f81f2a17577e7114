"""Portion-size regression from four-channel RGB-Distribution crops."""

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
from dietlens.energy import EnergyMap, GeneratorModel, crop_energy_map, generate_energy_map
from dietlens.nets import ResNetHead, check_finite, load_checkpoint, save_checkpoint, seed_everything

log = logging.getLogger(__name__)

RGB_RANGE = 255.0
CHANNEL_MODES = ("rgbd", "rgb", "dist")


@dataclass
class RGBDistributionImage:
    """HxWx4 float32: R, G, B (0-255) and the distribution channel on the same 0-255 scale.

    ``map_max`` stored map units correspond to 255 in channel 4 for every
    crop, so magnitudes stay comparable across crops.
    """

    data: np.ndarray
    energy_scale: float
    map_max: float

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[2] != 4:
            raise ValueError(f"expected HxWx4 data, got shape {self.data.shape}")

    @property
    def rgb(self) -> np.ndarray:
        return self.data[..., :3]

    @property
    def distribution(self) -> np.ndarray:
        return self.data[..., 3]


def fuse_rgbd(rgb_crop: np.ndarray, map_crop: EnergyMap, map_max: float) -> RGBDistributionImage:
    if rgb_crop.shape[:2] != map_crop.shape:
        raise ValueError(f"crop sizes differ: rgb {rgb_crop.shape[:2]} vs map {map_crop.shape}")
    if not map_max > 0:
        raise ValueError("map_max must be > 0")
    data = np.empty(rgb_crop.shape[:2] + (4,), dtype=np.float32)
    data[..., :3] = rgb_crop
    data[..., 3] = map_crop.raster.astype(np.float64) * (RGB_RANGE / map_max)
    return RGBDistributionImage(data, map_crop.energy_scale, float(map_max))


def l1_loss(pred: float, gt: float) -> float:
    return abs(gt - pred)


def to_input(img: RGBDistributionImage, size: int, channels: str = "rgbd") -> torch.Tensor:
    """4 x size x size network input at the crop's native scale.

    Portion size is about scale, so crops are not stretched to fill the
    input: a crop that fits is pasted into the top-left corner of a zero
    canvas. Larger crops are shrunk (aspect kept) and the distribution
    channel is multiplied by the area ratio so its sum survives.
    ``channels`` masks inputs for the single-source baselines.
    """
    if channels not in CHANNEL_MODES:
        raise ValueError(f"channels must be one of {CHANNEL_MODES}")
    h, w = img.data.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("zero-area RGB-Distribution image")
    t = torch.from_numpy(np.ascontiguousarray(img.data)).permute(2, 0, 1).float()
    nh, nw = h, w
    if max(h, w) > size:
        s = size / max(h, w)
        nh, nw = max(1, round(h * s)), max(1, round(w * s))
        t = F.interpolate(t[None], size=(nh, nw), mode="bilinear", align_corners=False, antialias=True)[0]
        t[3] *= (h * w) / (nh * nw)
    out = torch.zeros(4, size, size)
    if channels != "dist":
        out[:3, :nh, :nw] = t[:3] / 127.5 - 1.0
    if channels != "rgb":
        out[3, :nh, :nw] = t[3] / RGB_RANGE
    return out


@dataclass
class RegressorHyper:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-4
    input_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1)
    channels: str = "rgbd"
    random_ops: bool = True

    def __post_init__(self) -> None:
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        if self.channels not in CHANNEL_MODES:
            raise ValueError(f"channels must be one of {CHANNEL_MODES}")


@dataclass
class RegressorModel:
    net: ResNetHead
    hyper: RegressorHyper
    kcal_scale: float  # network output unit, in kcal
    map_max: float  # stored map units shown as 255 in the distribution channel
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def input_size(self) -> int:
        return self.hyper.input_size

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(
            path, "regressor", asdict(self.hyper), self.seed, self.net.state_dict(),
            kcal_scale=self.kcal_scale, map_max=self.map_max, history=self.history,
        )

    @classmethod
    def load(cls, path: str | Path) -> RegressorModel:
        header, state = load_checkpoint(path, "regressor")
        hyper = RegressorHyper(**header["hyper"])
        net = ResNetHead(4, 1, hyper.widths, hyper.blocks)
        net.load_state_dict(state)
        net.eval()
        return cls(net, hyper, header["kcal_scale"], header["map_max"], header["seed"], header["history"])


def _batch(pairs, hyper: RegressorHyper, op=None):
    xs = []
    for img, _ in pairs:
        if op is not None:
            img = RGBDistributionImage(transform_raster(img.data, op), img.energy_scale, img.map_max)
        xs.append(to_input(img, hyper.input_size, hyper.channels))
    return torch.stack(xs)


def train_regressor(
    pairs: list[tuple[RGBDistributionImage, float]],
    hyper: RegressorHyper | None = None,
    seed: int = 0,
    val_pairs: list[tuple[RGBDistributionImage, float]] | None = None,
) -> RegressorModel:
    """Fit kcal with mean L1 loss; train/val MAE (kcal) are logged per epoch."""
    hyper = hyper or RegressorHyper()
    if not pairs:
        raise ValueError("regressor training needs at least one pair")
    targets = np.array([k for _, k in pairs], dtype=np.float64)
    if (targets < 0).any() or not np.isfinite(targets).all():
        raise ValueError("kcal targets must be finite and >= 0")
    kcal_scale = float(targets.mean()) or 1.0
    map_maxes = {img.map_max for img, _ in pairs}
    if len(map_maxes) != 1:
        raise ValueError(f"pairs were fused with different map_max values: {sorted(map_maxes)}")

    gen = seed_everything(seed)
    rng = np.random.default_rng(seed)
    net = ResNetHead(4, 1, hyper.widths, hyper.blocks)
    opt = torch.optim.AdamW(net.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    steps = hyper.epochs * math.ceil(len(pairs) / hyper.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=hyper.lr, total_steps=max(steps, 1), pct_start=0.2)

    variants = [_batch(pairs, hyper)]
    if hyper.random_ops:
        variants += [_batch(pairs, hyper, op) for op in ALL_OPS]
    y = torch.from_numpy(targets / kcal_scale).float()
    x_val = y_val = None
    if val_pairs:
        x_val = _batch(val_pairs, hyper)
        y_val = np.array([k for _, k in val_pairs], dtype=np.float64)

    history = []
    n = len(pairs)
    for epoch in range(hyper.epochs):
        net.train()
        order = torch.randperm(n, generator=gen)
        pick = rng.integers(len(variants), size=n)
        abs_err, count = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            x = torch.stack([variants[pick[i]][i] for i in idx.tolist()])
            pred = net(x)[:, 0]
            loss = (pred - y[idx]).abs().mean()
            check_finite(loss, "regressor", epoch, count)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            abs_err += loss.item() * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "train_mae": abs_err / count * kcal_scale}
        if x_val is not None:
            pred_val = _predict(net, x_val) * kcal_scale
            row["val_mae"] = float(np.abs(np.maximum(pred_val, 0.0) - y_val).mean())
        history.append(row)
        log.info("regressor epoch %d %s", epoch, row)
    net.eval()
    return RegressorModel(net, hyper, kcal_scale, map_maxes.pop(), seed, history)


@torch.no_grad()
def _predict(net, x: torch.Tensor) -> np.ndarray:
    net.eval()
    return torch.cat([net(x[i : i + 256])[:, 0] for i in range(0, len(x), 256)]).double().numpy()


def estimate_portion(model: RegressorModel, img: RGBDistributionImage) -> float:
    """Predicted kcal for one crop, clamped at 0."""
    x = to_input(img, model.input_size, model.hyper.channels)[None]
    raw = float(_predict(model.net, x)[0]) * model.kcal_scale
    if raw < 0:
        log.debug("negative portion estimate %.3f clamped to 0", raw)
        return 0.0
    return raw


def estimate_many(model: RegressorModel, imgs) -> np.ndarray:
    if not imgs:
        return np.zeros(0)
    x = torch.stack([to_input(i, model.input_size, model.hyper.channels) for i in imgs])
    return np.maximum(_predict(model.net, x) * model.kcal_scale, 0.0)


def pairs_from_manifest(
    manifest: DatasetManifest, map_max: float, generator: GeneratorModel | None = None
) -> list[tuple[RGBDistributionImage, float]]:
    """One (RGB-Distribution crop, kcal) pair per groundtruth annotation.

    The distribution channel comes from the groundtruth map, or from
    ``generator`` when given (the map is generated once per image).
    """
    pairs = []
    for rec in manifest.records:
        if not rec.annotations:
            continue
        image = manifest.load_image(rec)
        emap = generate_energy_map(generator, image) if generator is not None else manifest.load_energy_map(rec)
        for a in rec.annotations:
            fused = fuse_rgbd(crop_region(image, a.bbox), crop_energy_map(emap, a.bbox), map_max)
            pairs.append((fused, a.kcal))
    return pairs
