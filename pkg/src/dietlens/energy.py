"""Energy-distribution maps: conditional-GAN generator, cropping and integration.

The generator regresses the map normalized by a fixed global maximum
(``map_max`` stored units); ``energy_scale`` converts stored units to kcal.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from dietlens.data import BoundingBox, DatasetManifest, ManifestError, crop_region
from dietlens.nets import check_finite, load_checkpoint, save_checkpoint, seed_everything

log = logging.getLogger(__name__)

EPS = 1e-12


@dataclass
class EnergyMap:
    """Single-channel nonnegative raster; kcal per pixel = value * energy_scale."""

    raster: np.ndarray
    energy_scale: float = 1.0

    def __post_init__(self) -> None:
        self.raster = np.asarray(self.raster)
        if self.raster.ndim != 2:
            raise ValueError(f"energy map must be 2-D, got shape {self.raster.shape}")
        if self.raster.size and self.raster.min() < 0:
            raise ValueError("energy map values must be >= 0")
        if not self.energy_scale > 0:
            raise ValueError("energy_scale must be > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.raster.shape


def crop_energy_map(emap: EnergyMap, bbox: BoundingBox) -> EnergyMap:
    return EnergyMap(crop_region(emap.raster, bbox), emap.energy_scale)


def integrate_energy(emap: EnergyMap) -> float:
    """Total kcal held by the map: (sum of values) * energy_scale."""
    r = emap.raster
    total = int(r.sum(dtype=np.int64)) if r.dtype.kind in "iub" else float(r.sum(dtype=np.float64))
    return total * emap.energy_scale


# ------------------------------------------------------------------------ losses


def cgan_losses(d_real: float, d_fake: float, fake_map, real_map, lam: float) -> tuple[float, float]:
    """Discriminator and generator losses for one conditional-GAN step.

    ``d_loss = -[log D(x,y) + log(1 - D(x,G(x)))]`` and the non-saturating
    ``g_loss = -log D(x,G(x)) + lam * mean|G(x) - y|``. Probabilities are
    clamped to ``[EPS, 1 - EPS]``.
    """
    fake = np.asarray(getattr(fake_map, "raster", fake_map), dtype=np.float64)
    real = np.asarray(getattr(real_map, "raster", real_map), dtype=np.float64)
    if fake.shape != real.shape:
        raise ValueError(f"map shapes differ: {fake.shape} vs {real.shape}")
    d_real = min(max(float(d_real), EPS), 1 - EPS)
    d_fake = min(max(float(d_fake), EPS), 1 - EPS)
    l1 = float(np.abs(fake - real).mean()) if fake.size else 0.0
    d_loss = -(math.log(d_real) + math.log(1.0 - d_fake))
    g_loss = -math.log(d_fake) + lam * l1
    return d_loss, g_loss


def _cgan_losses_torch(real_logits, fake_logits_detached, fake_logits, fake, real, lam):
    """Batched form of :func:`cgan_losses` on discriminator logits (patch means)."""
    # log(sigmoid(t)) and log(1 - sigmoid(t)) = logsigmoid(-t), numerically stable
    d_loss = -(F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits_detached).mean())
    l1 = (fake - real).abs().mean()
    g_adv = -F.logsigmoid(fake_logits).mean()
    return d_loss, g_adv + lam * l1, g_adv, l1


# ------------------------------------------------------------------------ models


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections; dropout in the decoder plays the noise input."""

    def __init__(self, depth: int = 4, base: int = 16, dropout: float = 0.3):
        super().__init__()
        self.depth = depth
        chans = [min(base * 2**i, base * 8) for i in range(depth + 1)]
        self.inc = nn.Sequential(nn.Conv2d(3, chans[0], 3, 1, 1), nn.LeakyReLU(0.2, inplace=True))
        self.downs = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1, bias=False),
                nn.BatchNorm2d(chans[i + 1]),
                nn.LeakyReLU(0.2, inplace=True),
            )
            for i in range(depth)
        )
        self.ups = nn.ModuleList()
        for i in reversed(range(depth)):
            cin = chans[i + 1] if i == depth - 1 else chans[i + 1] * 2
            layers = [nn.ConvTranspose2d(cin, chans[i], 4, 2, 1, bias=False), nn.BatchNorm2d(chans[i])]
            if dropout > 0 and i >= depth - 2:
                layers.append(nn.Dropout(dropout))
            layers.append(nn.ReLU(inplace=True))
            self.ups.append(nn.Sequential(*layers))
        self.out = nn.Conv2d(chans[0] * 2, 1, 3, 1, 1)

    def forward(self, x):
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        h = skips.pop()
        for k, up in enumerate(self.ups):
            if k > 0:
                h = torch.cat([h, skips.pop()], dim=1)
            h = up(h)
        h = torch.cat([h, skips.pop()], dim=1)
        return self.out(h)


class PatchDiscriminator(nn.Module):
    """Scores overlapping patches of the (image, map) channel concatenation."""

    def __init__(self, base: int = 16, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(4, base, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
        c = base
        for _ in range(1, n_layers):
            layers += [nn.Conv2d(c, c * 2, 4, 2, 1, bias=False), nn.BatchNorm2d(c * 2), nn.LeakyReLU(0.2, inplace=True)]
            c *= 2
        layers.append(nn.Conv2d(c, 1, 3, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x, y):
        return self.net(torch.cat([x, y], dim=1))


@dataclass
class GANHyper:
    epochs: int = 16
    batch_size: int = 8
    lr: float = 1e-3
    lam: float = 100.0
    depth: int = 4
    base: int = 16
    dropout: float = 0.1
    disc_base: int = 16
    map_max: float | None = None  # stored units mapped to 1.0; default: max over train maps

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class GeneratorModel:
    net: UNetGenerator
    hyper: GANHyper
    map_max: float
    energy_scale: float
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(
            path,
            "energy-gan",
            asdict(self.hyper),
            self.seed,
            self.net.state_dict(),
            map_max=self.map_max,
            energy_scale=self.energy_scale,
            history=self.history,
        )

    @classmethod
    def load(cls, path: str | Path) -> GeneratorModel:
        header, state = load_checkpoint(path, "energy-gan")
        hyper = GANHyper(**header["hyper"])
        net = UNetGenerator(hyper.depth, hyper.base, hyper.dropout)
        net.load_state_dict(state)
        net.eval()
        return cls(net, hyper, header["map_max"], header["energy_scale"], header["seed"], header["history"])


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 -> 1x3xHxW float in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1)
    return (t / 127.5 - 1.0).unsqueeze(0)


def _load_pairs(manifest: DatasetManifest):
    xs, ys, scales = [], [], set()
    for rec in manifest.records:
        if rec.energy_map_path is None:
            raise ManifestError("missing groundtruth energy map", rec.image_id, "energy_map_path")
        img = manifest.load_image(rec)
        emap = manifest.load_energy_map(rec)
        if emap.shape != img.shape[:2]:
            raise ManifestError("energy map size differs from image size", rec.image_id, "energy_map_path")
        xs.append(image_to_tensor(img)[0])
        ys.append(torch.from_numpy(emap.raster.astype(np.float32))[None])
        scales.add(rec.energy_scale)
    if len(scales) > 1:
        raise ValueError(f"mixed energy_scale values in training set: {sorted(scales)}")
    return torch.stack(xs), torch.stack(ys), scales.pop()


def train_energy_gan(manifest: DatasetManifest, hyper: GANHyper | None = None, seed: int = 0) -> GeneratorModel:
    """Alternate discriminator/generator updates on (image, groundtruth map) pairs."""
    hyper = hyper or GANHyper()
    if not manifest.records:
        raise ValueError("energy GAN needs at least one training record")
    x_all, y_all, energy_scale = _load_pairs(manifest)
    map_max = float(hyper.map_max or y_all.max().item() or 1.0)
    y_all = y_all / map_max

    gen = seed_everything(seed)
    net_g = UNetGenerator(hyper.depth, hyper.base, hyper.dropout)
    net_d = PatchDiscriminator(hyper.disc_base)
    opt_g = torch.optim.Adam(net_g.parameters(), lr=hyper.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(net_d.parameters(), lr=hyper.lr, betas=(0.5, 0.999))
    # constant rate for the first half, then linear decay to zero
    half = hyper.epochs // 2
    decay = lambda e: 1.0 - max(0, e - half) / (hyper.epochs - half + 1)  # noqa: E731
    scheds = [torch.optim.lr_scheduler.LambdaLR(o, decay) for o in (opt_g, opt_d)]
    x_all = _pad_to_multiple(x_all, 2**hyper.depth)
    y_all = _pad_to_multiple(y_all, 2**hyper.depth)

    history = []
    n = len(x_all)
    for epoch in range(hyper.epochs):
        net_g.train()
        net_d.train()
        order = torch.randperm(n, generator=gen)
        sums = {"d_loss": 0.0, "g_loss": 0.0, "g_adv": 0.0, "l1": 0.0}
        steps = 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            x, y = x_all[idx], y_all[idx]
            fake = net_g(x)

            real_logits = net_d(x, y)
            fake_logits_d = net_d(x, fake.detach())
            fake_logits_g = net_d(x, fake)
            d_loss, g_loss, g_adv, l1 = _cgan_losses_torch(real_logits, fake_logits_d, fake_logits_g, fake, y, hyper.lam)
            check_finite(d_loss, "energy-gan/D", epoch, steps)
            check_finite(g_loss, "energy-gan/G", epoch, steps)

            opt_d.zero_grad()
            d_loss.backward(inputs=list(net_d.parameters()), retain_graph=True)
            opt_g.zero_grad()
            g_loss.backward(inputs=list(net_g.parameters()))
            opt_d.step()
            opt_g.step()

            for k, v in zip(sums, (d_loss, g_loss, g_adv, l1)):
                sums[k] += v.item()
            steps += 1
        for sch in scheds:
            sch.step()
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        history.append(row)
        log.info("energy-gan epoch %d d=%.4f g=%.4f l1=%.4f", epoch, row["d_loss"], row["g_loss"], row["l1"])

    net_g.eval()
    return GeneratorModel(net_g, hyper, map_max, energy_scale, seed, history)


def _pad_to_multiple(t: torch.Tensor, m: int) -> torch.Tensor:
    h, w = t.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        t = F.pad(t, (0, pw, 0, ph), mode="replicate")
    return t


@torch.no_grad()
def generate_energy_map(model: GeneratorModel, image: np.ndarray) -> EnergyMap:
    """Predict a map with the image's height and width; values clamped at 0."""
    model.net.eval()
    h, w = image.shape[:2]
    x = _pad_to_multiple(image_to_tensor(image), 2**model.hyper.depth)
    out = model.net(x)[0, 0, :h, :w].clamp_min(0.0) * model.map_max
    return EnergyMap(out.numpy().astype(np.float32), model.energy_scale)


def map_l1_error(model: GeneratorModel, manifest: DatasetManifest) -> tuple[float, float]:
    """Held-out (mean per-pixel |generated - groundtruth|, mean groundtruth value) in stored units."""
    err, ref, count = 0.0, 0.0, 0
    for rec in manifest.records:
        gt = manifest.load_energy_map(rec).raster.astype(np.float64)
        pred = generate_energy_map(model, manifest.load_image(rec)).raster.astype(np.float64)
        err += np.abs(pred - gt).sum()
        ref += gt.sum()
        count += gt.size
    return err / count, ref / count
