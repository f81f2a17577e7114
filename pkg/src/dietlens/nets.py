"""Shared network pieces, seeding and the versioned checkpoint format."""

from __future__ import annotations

import io
import random
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, step {step}")


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetSmall(nn.Module):
    """Residual trunk with configurable width/depth.

    ``widths[i]`` channels and ``blocks[i]`` BasicBlocks per stage; every
    stage after the first halves the resolution. ``widths=(64,128,256,512)``
    with ``blocks=(2,2,2,2)`` gives the usual 18-layer layout.
    """

    def __init__(self, in_channels: int, widths=(16, 32, 64), blocks=(1, 1, 1), stem_stride: int = 1):
        super().__init__()
        if len(widths) != len(blocks):
            raise ValueError("widths and blocks must have equal length")
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, stem_stride, 1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        layers = []
        cin = widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(cin, w, stride))
                cin = w
        self.layers = nn.Sequential(*layers)
        self.out_channels = cin
        self.stride = stem_stride * 2 ** (len(widths) - 1)

    def forward(self, x):
        return self.layers(self.stem(x))


class ResNetHead(nn.Module):
    """Trunk + global average pool + linear layer."""

    def __init__(self, in_channels: int, n_out: int, widths=(16, 32, 64), blocks=(1, 1, 1)):
        super().__init__()
        self.trunk = ResNetSmall(in_channels, widths, blocks)
        self.fc = nn.Linear(self.trunk.out_channels, n_out)

    def forward(self, x):
        feats = self.trunk(x)
        return self.fc(feats.mean(dim=(2, 3)))


def resize_batch(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-2:] == (size, size):
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


def save_checkpoint(path: str | Path, kind: str, hyper: dict, seed: int, state: dict, **meta) -> Path:
    """Write ``{header, state}`` to one file; the header records kind, version, hyper and seed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"kind": kind, "version": CHECKPOINT_VERSION, "hyper": hyper, "seed": seed, **meta}
    buf = io.BytesIO()
    torch.save({"header": header, "state": state}, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path, kind: str) -> tuple[dict, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    header = blob.get("header", {})
    if header.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, blob["state"]
