"""PCDNet assembly: encoders, feature blending and the deformation network."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .blending import FEATURE_MODES, CameraIntrinsics, blend, feature_width
from .errors import ConfigError, ShapeError
from .layers import (EncoderConfig, GraphX, ImageEncoder, Linear, Module, PointMLPEncoder, ResBlock)
from .tensor import DTYPES, Tensor

VARIANTS = ("FC", "ResFC", "GraphX", "ResGraphX", "UpResGraphX", "UpResGraphXSlim")
UPSAMPLING = ("UpResGraphX", "UpResGraphXSlim")


@dataclass
class ModelConfig:
    variant: str = "UpResGraphX"
    n_points: int = 2000
    image_size: Tuple[int, int] = (64, 64)
    channels: Tuple[int, ...] = (16, 32, 64)
    widths: Tuple[int, ...] = (96, 64, 48)
    expansion: Optional[Tuple[int, ...]] = None  # per block; None -> (1, ..., 1, 2) for Up variants
    rank: Optional[int] = None
    feature_mode: str = "full"
    convs_per_scale: int = 2
    mlp_layers_per_block: int = 2
    dtype: str = "f32"
    camera: Optional[dict] = None  # CameraIntrinsics fields; None -> default for image_size

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.channels = tuple(int(v) for v in self.channels)
        self.widths = tuple(int(v) for v in self.widths)
        if self.expansion is not None:
            self.expansion = tuple(int(v) for v in self.expansion)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {self.feature_mode!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")
        if self.n_points < 1 or not self.widths or min(self.widths) < 1:
            raise ConfigError("n_points and widths must be positive")
        exp = self.block_expansion()
        if len(exp) != len(self.widths) or min(exp) < 1:
            raise ConfigError(f"expansion {exp} must give one ratio >= 1 per width {self.widths}")
        if self.variant not in UPSAMPLING and any(e != 1 for e in exp):
            raise ConfigError(f"variant {self.variant} cannot change the point count")

    def block_expansion(self) -> Tuple[int, ...]:
        if self.variant not in UPSAMPLING:
            return self.expansion or (1,) * len(self.widths)
        return self.expansion or (1,) * (len(self.widths) - 1) + (2,)

    @property
    def n_out(self) -> int:
        return self.n_points * int(np.prod(self.block_expansion()))

    def intrinsics(self) -> CameraIntrinsics:
        if self.camera is None:
            return CameraIntrinsics.default(self.image_size)
        return CameraIntrinsics(**self.camera)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.channels, self.convs_per_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("image_size", "channels", "widths", "expansion"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(self.to_dict().items())).encode()).hexdigest()[:16]


def desk_config(variant: str = "UpResGraphX", n_points: int = 2000, **kw) -> ModelConfig:
    return ModelConfig(variant=variant, n_points=n_points, **kw)


def paper_config(variant: str = "UpResGraphX", n_points: int = 2000, **kw) -> ModelConfig:
    """Full deformation widths; encoder remains a stand-in with four scales on 224x224 input."""
    kw.setdefault("image_size", (224, 224))
    kw.setdefault("channels", (64, 128, 256, 512))
    return ModelConfig(variant=variant, n_points=n_points, widths=(512, 256, 128), **kw)


def tiny_config(variant: str = "UpResGraphX", n_points: int = 32, **kw) -> ModelConfig:
    kw.setdefault("image_size", (16, 16))
    kw.setdefault("channels", (4, 8))
    kw.setdefault("convs_per_scale", 1)
    kw.setdefault("mlp_layers_per_block", 1)
    return ModelConfig(variant=variant, n_points=n_points, widths=(16, 8), **kw)


NAMED_CONFIGS = {"desk": desk_config, "paper": paper_config, "tiny": tiny_config}


class PCDNet(Module):
    """Deforms an initial point cloud into the shape shown in a grayscale image."""

    def __init__(self, cfg: ModelConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.cam = cfg.intrinsics()
        dtype = DTYPES[cfg.dtype]
        enc = cfg.encoder_config()
        self.image_encoder = ImageEncoder(enc, rng=rng, dtype=dtype)
        self.point_encoder = PointMLPEncoder(enc, cfg.mlp_layers_per_block, rng=rng, dtype=dtype)
        self.blocks = self._build_deformation(rng, dtype)
        self.head = Linear(cfg.widths[-1], 3, rng=rng, dtype=dtype)

    def _build_deformation(self, rng, dtype) -> List[Module]:
        cfg = self.cfg
        d = feature_width(cfg.channels, cfg.feature_mode)
        n = cfg.n_points
        blocks: List[Module] = []
        for w, e in zip(cfg.widths, cfg.block_expansion()):
            v = cfg.variant
            if v == "FC":
                blocks.append(Linear(d, w, "relu", rng=rng, dtype=dtype))
            elif v == "ResFC":
                blocks.append(ResBlock(n, n, d, w, mixer="fc", rng=rng, dtype=dtype))
            elif v == "GraphX":
                blocks.append(GraphX(n, n, d, w, rank=cfg.rank, activation="relu", rng=rng, dtype=dtype))
            elif v == "ResGraphX":
                blocks.append(ResBlock(n, n, d, w, mixer="graphx", rank=cfg.rank, rng=rng, dtype=dtype))
            else:
                mixer = "slim" if v == "UpResGraphXSlim" else "graphx"
                blocks.append(ResBlock(n, n * e, d, w, mixer=mixer, rank=cfg.rank, rng=rng, dtype=dtype))
            d, n = w, n * e
        return blocks

    @property
    def dtype(self):
        return DTYPES[self.cfg.dtype]

    @property
    def n_in(self) -> int:
        return self.cfg.n_points

    @property
    def n_out(self) -> int:
        return self.cfg.n_out

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x if x.dtype == self.dtype else Tensor(x.data, x.requires_grad, dtype=self.dtype)
        return Tensor(np.asarray(x), dtype=self.dtype)

    def encode_image(self, image) -> List[Tensor]:
        return self.image_encoder(self._as_input(image))

    def encode(self, image, cloud) -> Tensor:
        """Blended per-point features (the deformation network's input)."""
        cloud = self._as_input(cloud)
        if cloud.shape != (self.n_in, 3):
            raise ShapeError(f"model expects an initial cloud of shape ({self.n_in}, 3), got {cloud.shape}")
        pyramid = self.encode_image(image)
        return blend(cloud, self.cam, pyramid, self.point_encoder(cloud), self.cfg.image_size,
                     self.cfg.feature_mode)

    def decode(self, latent) -> Tensor:
        x = self._as_input(latent)
        for block in self.blocks:
            x = block(x)
        return self.head(x)

    def forward(self, image, cloud) -> Tensor:
        return self.decode(self.encode(image, cloud))

    def graphx_layers(self) -> List[Tuple[str, Module]]:
        """(name, layer) for every mixing layer in the deformation network."""
        out = []
        for i, b in enumerate(self.blocks):
            if isinstance(b, GraphX):
                out.append((f"blocks.{i}", b))
            elif isinstance(b, ResBlock):
                if isinstance(b.mixer, GraphX):
                    out.append((f"blocks.{i}.mixer", b.mixer))
                if isinstance(b.residual, GraphX):
                    out.append((f"blocks.{i}.residual", b.residual))
        return out


def init_point_cloud(n: int, cam: CameraIntrinsics, image_shape: Tuple[int, int], rng,
                     dtype=np.float32) -> Tensor:
    """Random cloud whose projection covers the image: uniform (u, v, z), back-projected."""
    if n < 1:
        raise ConfigError("initial cloud needs at least one point")
    h, w = image_shape
    u = rng.uniform(0, w, size=n)
    v = rng.uniform(0, h, size=n)
    z = rng.uniform(cam.near, cam.far, size=n)
    pts = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    return Tensor(pts, dtype=dtype)


def predict(model: PCDNet, image, rng) -> np.ndarray:
    """One forward pass on a freshly drawn initial cloud, without recording a graph."""
    with T.no_grad():
        cloud = init_point_cloud(model.n_in, model.cam, model.cfg.image_size, rng, model.dtype)
        return model(image, cloud).data


def generate_dense(model: PCDNet, image, total_points: int, rng, chunk: Optional[int] = None) -> np.ndarray:
    """Merge the outputs of several independently drawn initial clouds."""
    per = model.n_out
    if chunk is not None and chunk != per:
        raise ConfigError(f"this model produces {per} points per pass; chunk={chunk} is not supported")
    if total_points < 1 or total_points % per:
        lower = max(per, (total_points // per) * per)
        upper = lower + per if lower < total_points else lower
        raise ConfigError(f"{total_points} points is not a multiple of the model output size {per}; "
                          f"nearest valid sizes are {lower} and {upper}")
    return np.concatenate([predict(model, image, rng) for _ in range(total_points // per)], axis=0)
