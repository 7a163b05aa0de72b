"""PLY export and the experiment configuration file."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import pcdt
from .blending import CameraIntrinsics
from .data import CATEGORIES
from .errors import ConfigError, SerializationError
from .model import ModelConfig
from .training import TrainConfig


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def export_ply(cloud, path) -> None:
    """ASCII PLY with float x/y/z vertices, 6 significant digits."""
    pts = np.asarray(getattr(cloud, "data", cloud), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SerializationError(f"PLY export expects (N, 3) points, got {pts.shape}")
    bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
    if bad.size:
        raise SerializationError(f"point {int(bad[0])} has a non-finite coordinate {pts[bad[0]].tolist()}")
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z", "end_header"]
    lines += [" ".join(f"{v:.6g}" for v in p) for p in pts]
    pcdt.atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_ply(path) -> np.ndarray:
    """Read the vertex positions written by :func:`export_ply`."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise SerializationError(f"{path} is not a PLY file")
    n = None
    for i, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"] or parts[:2] == ["format", "binary_big_endian"]:
            raise SerializationError("only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        if line.strip() == "end_header":
            body = text[i + 1:i + 1 + (n or 0)]
            break
    else:
        raise SerializationError(f"{path}: missing end_header")
    if n is None or len(body) != n:
        raise SerializationError(f"{path}: expected {n} vertices, found {len(body)}")
    return np.array([[float(v) for v in l.split()[:3]] for l in body], dtype=np.float64).reshape(n, 3)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class DataSection:
    categories: List[str] = field(default_factory=lambda: list(CATEGORIES))
    n_per_category: int = 100
    split_ratio: float = 0.8
    image_size: List[int] = field(default_factory=lambda: [64, 64])
    n_gt: int = 1024
    camera: Optional[dict] = None  # fx, fy, cx, cy, near, far; None -> default for image_size

    def validate(self):
        bad = [c for c in self.categories if c not in CATEGORIES]
        if bad or not self.categories:
            raise ConfigError(f"unknown categories {bad}; available: {list(CATEGORIES)}")
        if self.n_per_category < 2 or not 0 < self.split_ratio < 1 or self.n_gt < 1:
            raise ConfigError("need n_per_category >= 2, 0 < split_ratio < 1, n_gt >= 1")
        if len(self.image_size) != 2:
            raise ConfigError("image_size must be [height, width]")
        self.intrinsics()

    def intrinsics(self) -> CameraIntrinsics:
        if self.camera is None:
            return CameraIntrinsics.default(tuple(self.image_size))
        unknown = set(self.camera) - {f.name for f in fields(CameraIntrinsics)}
        if unknown:
            raise ConfigError(f"unknown camera keys: {sorted(unknown)}")
        return CameraIntrinsics(**self.camera)


@dataclass
class ModelSection:
    variant: str = "GraphX"
    n_points: int = 500
    channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    widths: List[int] = field(default_factory=lambda: [96, 64, 48])
    expansion: Optional[List[int]] = None
    rank: Optional[int] = None
    feature_mode: str = "full"
    convs_per_scale: int = 2
    mlp_layers_per_block: int = 2
    dtype: str = "f32"


@dataclass
class TrainSection:
    lr: float = 1e-3
    lr_decay: float = 0.3
    milestones: Optional[List[int]] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 1e-5
    batch_size: int = 4
    epochs: int = 10
    max_steps: Optional[int] = None
    checkpoint_every: int = 0
    nn_backend: str = "brute_force"


@dataclass
class IOSection:
    run_dir: str = "runs/default"
    dataset_dir: str = "data/synth"
    seed: int = 0
    deterministic: bool = True


SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection, "io": IOSection}


@dataclass
class ExperimentConfig:
    """Four-section experiment description; unknown keys are rejected."""

    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    io: IOSection = field(default_factory=IOSection)

    @classmethod
    def from_dict(cls, doc: Optional[dict]) -> "ExperimentConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping of sections")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            sec = doc.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            bad = set(sec) - {f.name for f in fields(klass)}
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            parts[name] = klass(**sec)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def validate(self) -> None:
        self.data.validate()
        self.model_config()
        self.train_config()

    def model_config(self) -> ModelConfig:
        m = asdict(self.model)
        return ModelConfig(image_size=tuple(self.data.image_size), camera=self.data.intrinsics().to_dict(), **m)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.io.seed, deterministic=self.io.deterministic, **asdict(self.train))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path) -> None:
        pcdt.atomic_write_bytes(path, self.dumps().encode())
