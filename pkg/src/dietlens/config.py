"""Single JSON run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from dietlens.classifier import ClassifierHyper
from dietlens.detector import DetectorHyper
from dietlens.energy import GANHyper
from dietlens.metrics import COCO_THRESHOLDS
from dietlens.portion import RegressorHyper
from dietlens.synthetic import SceneConfig

STAGES = ("detector", "classifier", "energy-gan", "regressor")


@dataclass
class SyntheticSettings:
    n: int = 230
    val_frac: float = 0.13  # 30 of 230
    test_frac: float = 0.0


@dataclass
class EvalSettings:
    iou_thresholds: tuple[float, ...] = COCO_THRESHOLDS
    match_iou: float = 0.5
    split: str = "val"

    def __post_init__(self) -> None:
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    manifest: str | None = None  # default: <out_dir>/data/manifest.json
    train_manifest: str | None = None  # default: manifest (point at an augmented one to use it)
    checkpoints: dict[str, str] = field(default_factory=dict)  # default: <out_dir>/checkpoints/<stage>.pt
    regressor_map_source: str = "generated"  # or "groundtruth"
    scene: SceneConfig = field(default_factory=SceneConfig)
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    detector: DetectorHyper = field(default_factory=DetectorHyper)
    classifier: ClassifierHyper = field(default_factory=ClassifierHyper)
    gan: GANHyper = field(default_factory=GANHyper)
    regressor: RegressorHyper = field(default_factory=RegressorHyper)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self) -> None:
        if self.regressor_map_source not in ("generated", "groundtruth"):
            raise ValueError("regressor_map_source must be 'generated' or 'groundtruth'")
        unknown = set(self.checkpoints) - set(STAGES) - {"regressor_rgb", "regressor_dist"}
        if unknown:
            raise ValueError(f"unknown checkpoint keys: {sorted(unknown)}")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else self.out / "data" / "manifest.json"

    @property
    def train_manifest_path(self) -> Path:
        return Path(self.train_manifest) if self.train_manifest else self.manifest_path

    def checkpoint(self, stage: str) -> Path:
        if stage in self.checkpoints:
            return Path(self.checkpoints[stage])
        return self.out / "checkpoints" / f"{stage}.pt"

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["scene"] = self.scene.to_json()
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    @classmethod
    def from_json(cls, doc: dict) -> PipelineConfig:
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "scene": SceneConfig.from_json,
            "synthetic": lambda d: SyntheticSettings(**d),
            "detector": lambda d: DetectorHyper(**d),
            "classifier": lambda d: ClassifierHyper(**d),
            "gan": lambda d: GANHyper(**d),
            "regressor": lambda d: RegressorHyper(**d),
            "evaluation": lambda d: EvalSettings(**d),
        }
        for key, build in nested.items():
            if key in doc:
                doc[key] = build(doc[key])
        return cls(**doc)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    return PipelineConfig.from_json(json.loads(path.read_text()))
