"""Parametric building blocks: FC, GraphX family, image and point encoders."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

ACTIVATIONS = ("identity", "relu")


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return T.relu(x)
    if activation == "identity":
        return x
    raise ConfigError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return param(rng.uniform(-bound, bound, size=shape), dtype)


class Module:
    """Holds parameters as attributes; traversal order is attribute order."""

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

class Linear(Module):
    """Per-point affine map x @ W + b, shared across rows."""

    def __init__(self, d_in: int, d_out: int, activation: str = "identity", rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_out, self.activation = d_in, d_out, activation
        self.weight = kaiming_uniform(rng, (d_in, d_out), d_in, dtype)
        self.bias = param(np.zeros(d_out), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"Linear expects (N, {self.d_in}), got {x.shape}")
        return _activate(x @ self.weight + self.bias, self.activation)

    def count(self, n_points: int = 1) -> Tuple[int, int]:
        return self.d_in * self.d_out + self.d_out, n_points * self.d_in * self.d_out


# ---------------------------------------------------------------------------
# GraphX
# ---------------------------------------------------------------------------

class GraphX(Module):
    """Global point-mixing convolution.

    For output point k: ``h(W^T (sum_i w_ik f_i + b_k * 1) + b)``. The scalar
    mixing bias ``b_k`` is broadcast over every feature dimension. With
    ``rank`` set, ``W`` is stored as ``W1 @ W2`` and never materialized.
    """

    def __init__(self, n_in: int, n_out: int, d_in: int, d_out: int, rank: Optional[int] = None,
                 activation: str = "identity", rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        if rank is not None and not (0 < rank < d_in / 2):
            raise ConfigError(f"factored GraphX needs 0 < rank < d_in/2 = {d_in / 2}, got {rank}")
        self.n_in, self.n_out, self.d_in, self.d_out = n_in, n_out, d_in, d_out
        self.rank, self.activation = rank, activation
        bound = 1.0 / math.sqrt(n_in)
        self.mixing_weight = param(rng.uniform(-bound, bound, size=(n_out, n_in)), dtype)
        self.mixing_bias = param(np.zeros(n_out), dtype)
        if rank is None:
            self.weight = kaiming_uniform(rng, (d_in, d_out), d_in, dtype)
        else:
            self.weight1 = kaiming_uniform(rng, (d_in, rank), d_in, dtype)
            self.weight2 = kaiming_uniform(rng, (rank, d_out), rank, dtype)
        self.bias = param(np.zeros(d_out), dtype)

    @property
    def factored(self) -> bool:
        return self.rank is not None

    def transform(self, x: Tensor) -> Tensor:
        """Apply W (rows of x are feature vectors)."""
        if self.factored:
            return (x @ self.weight1) @ self.weight2
        return x @ self.weight

    def dense_weight(self) -> np.ndarray:
        if self.factored:
            return self.weight1.data @ self.weight2.data
        return self.weight.data

    def forward(self, x: Tensor) -> Tensor:
        return graphx_forward(x, self)

    def count(self) -> Tuple[int, int]:
        n_in, n_out, d_in, d_out = self.n_in, self.n_out, self.d_in, self.d_out
        mix_p, mix_m = n_out * n_in + n_out, n_out * n_in * d_in
        if self.factored:
            k = self.rank
            tr_p, tr_m = k * (d_in + d_out), n_out * (d_in * k + k * d_out)
        else:
            tr_p, tr_m = d_in * d_out, n_out * d_in * d_out
        return mix_p + tr_p + d_out, mix_m + tr_m


def graphx_forward(x: Tensor, layer: GraphX) -> Tensor:
    if x.ndim != 2 or x.shape != (layer.n_in, layer.d_in):
        raise ShapeError(f"GraphX expects ({layer.n_in}, {layer.d_in}), got {x.shape}")
    # W^T is linear, so mixing and transform commute; pick the cheaper order.
    n_in, n_out, d_in = layer.n_in, layer.n_out, layer.d_in
    d_t = layer.rank if layer.factored else layer.d_out
    mix_first = n_out * n_in * d_in + n_out * d_in * d_t
    transform_first = n_in * d_in * d_t + n_out * n_in * d_t
    if mix_first <= transform_first:
        mixed = layer.transform(layer.mixing_weight @ x)
    else:
        mixed = layer.mixing_weight @ layer.transform(x)
    ones = Tensor(np.ones((1, d_in), dtype=x.dtype))
    bias_dir = layer.transform(ones)  # W^T 1, shape (1, d_out)
    out = mixed + T.reshape(layer.mixing_bias, (n_out, 1)) * bias_dir + layer.bias
    return _activate(out, layer.activation)


class GraphXSlim(Module):
    """Mixing replaced by the point mean followed by a learned per-dimension scale and shift."""

    def __init__(self, n_in: int, n_out: int, d_in: int, d_out: int, rank: Optional[int] = None,
                 activation: str = "identity", rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        if rank is not None and not (0 < rank < d_in / 2):
            raise ConfigError(f"factored GraphX needs 0 < rank < d_in/2 = {d_in / 2}, got {rank}")
        self.n_in, self.n_out, self.d_in, self.d_out = n_in, n_out, d_in, d_out
        self.rank, self.activation = rank, activation
        self.scale = param(np.ones(d_in), dtype)
        self.shift = param(np.zeros(d_in), dtype)
        if rank is None:
            self.weight = kaiming_uniform(rng, (d_in, d_out), d_in, dtype)
        else:
            self.weight1 = kaiming_uniform(rng, (d_in, rank), d_in, dtype)
            self.weight2 = kaiming_uniform(rng, (rank, d_out), rank, dtype)
        self.bias = param(np.zeros(d_out), dtype)

    factored = GraphX.factored
    transform = GraphX.transform
    dense_weight = GraphX.dense_weight

    def forward(self, x: Tensor) -> Tensor:
        return graphx_slim_forward(x, self.scale, self.shift, self)

    def count(self) -> Tuple[int, int]:
        d_in, d_out = self.d_in, self.d_out
        if self.factored:
            tr_p, tr_m = self.rank * (d_in + d_out), d_in * self.rank + self.rank * d_out
        else:
            tr_p, tr_m = d_in * d_out, d_in * d_out
        # mean over points, one transformed row, replicated
        return 2 * d_in + tr_p + d_out, self.n_in * d_in + d_in + tr_m


def graphx_slim_forward(x: Tensor, scale: Tensor, shift: Tensor, layer) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.d_in or x.shape[0] < 1:
        raise ShapeError(f"GraphXSlim expects (N, {layer.d_in}), got {x.shape}")
    pooled = T.mean(x, 0, keepdims=True) * scale + shift
    row = _activate(layer.transform(pooled) + layer.bias, layer.activation)
    return Tensor(np.ones((layer.n_out, 1), dtype=x.dtype)) @ row


# ---------------------------------------------------------------------------
# residual blocks
# ---------------------------------------------------------------------------

MIXERS = ("fc", "graphx", "slim")
RESIDUALS = ("identity", "fc", "graphx")


class ResBlock(Module):
    """``main(x) + residual(x)`` with main = FC(relu) -> mixer.

    ``mixer='fc'`` gives ResFC, ``'graphx'`` ResGraphX (UpResGraphX when
    ``n_out != n_in``), ``'slim'`` the mean-aggregation variant.
    """

    def __init__(self, n_in: int, n_out: int, d_in: int, d_out: int, mixer: str = "graphx",
                 residual: Optional[str] = None, rank: Optional[int] = None, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        if mixer not in MIXERS:
            raise ConfigError(f"unknown mixer {mixer!r}; expected one of {MIXERS}")
        if mixer == "fc" and n_out != n_in:
            raise ConfigError("an FC main branch cannot change the point count")
        if residual is None:
            residual = "identity" if (n_in == n_out and d_in == d_out) else ("fc" if n_in == n_out else "graphx")
        if residual not in RESIDUALS:
            raise ConfigError(f"unknown residual {residual!r}; expected one of {RESIDUALS}")
        if residual == "identity" and (n_in != n_out or d_in != d_out):
            raise ConfigError(f"identity residual needs unchanged shape, got ({n_in},{d_in}) -> ({n_out},{d_out})")
        if residual == "fc" and n_in != n_out:
            raise ConfigError(f"FC residual cannot change point count {n_in} -> {n_out}; use a GraphX residual")
        self.n_in, self.n_out, self.d_in, self.d_out = n_in, n_out, d_in, d_out
        self.mixer_kind, self.residual_kind = mixer, residual
        self.fc = Linear(d_in, d_out, "relu", rng=rng, dtype=dtype)
        self.mixer = _make_mixer(mixer, n_in, n_out, d_out, d_out, rank, rng, dtype)
        if residual == "fc":
            self.residual = Linear(d_in, d_out, rng=rng, dtype=dtype)
        elif residual == "graphx":
            res_mixer = "slim" if mixer == "slim" else "graphx"
            self.residual = _make_mixer(res_mixer, n_in, n_out, d_in, d_out, None, rng, dtype)
        else:
            self.residual = None

    def main(self, x: Tensor) -> Tensor:
        return self.mixer(self.fc(x))

    def shortcut(self, x: Tensor) -> Tensor:
        return x if self.residual is None else self.residual(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.main(x) + self.shortcut(x)

    def zero_main(self) -> None:
        for p in self.mixer.parameters():
            p.data[...] = 0


def _make_mixer(kind, n_in, n_out, d_in, d_out, rank, rng, dtype):
    if kind == "fc":
        return Linear(d_in, d_out, rng=rng, dtype=dtype)
    cls = GraphX if kind == "graphx" else GraphXSlim
    return cls(n_in, n_out, d_in, d_out, rank=rank, rng=rng, dtype=dtype)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    """Image pyramid / point-MLP shape configuration.

    ``channels[i]`` is both the image feature channel count at scale i and
    the point-MLP output width at that scale.
    """

    image_size: Tuple[int, int] = (64, 64)
    channels: Tuple[int, ...] = (16, 32, 64)
    convs_per_scale: int = 2

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.convs_per_scale < 1:
            raise ConfigError("convs_per_scale must be >= 1")

    @property
    def scales(self) -> int:
        return len(self.channels)

    def map_shapes(self) -> List[Tuple[int, int, int]]:
        h, w = self.image_size
        factor = 2 ** self.scales
        if h % factor or w % factor:
            raise ConfigError(f"image size {self.image_size} must be divisible by {factor} "
                              f"(every one of the {self.scales} scales halves it)")
        out = []
        for c in self.channels:
            h, w = h // 2, w // 2
            out.append((c, h, w))
        return out


class Conv2d(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, pad=1, activation="relu", rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k, self.stride, self.pad = c_in, c_out, k, stride, pad
        self.activation = activation
        self.weight = kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        self.bias = param(np.zeros(c_out), dtype)

    def pre_activation(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.pad) + T.reshape(self.bias, (self.c_out, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return _activate(self.pre_activation(x), self.activation)

    def count(self, h_out: int, w_out: int) -> Tuple[int, int]:
        kk = self.c_in * self.k * self.k
        return self.c_out * kk + self.c_out, self.c_out * kk * h_out * w_out


class ImageEncoder(Module):
    """Plain feed-forward CNN: per scale a stride-2 3x3 conv then stride-1 3x3 convs, all ReLU.

    No skip connections. Returns one feature map per scale.
    """

    def __init__(self, cfg: EncoderConfig, in_channels: int = 1, activation: str = "relu",
                 rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg.map_shapes()
        self.cfg = cfg
        self.in_channels = in_channels
        self.stages: List[List[Conv2d]] = []
        prev = in_channels
        convs = []
        for c in cfg.channels:
            stage = [Conv2d(prev, c, stride=2, activation=activation, rng=rng, dtype=dtype)]
            stage += [Conv2d(c, c, activation=activation, rng=rng, dtype=dtype)
                      for _ in range(cfg.convs_per_scale - 1)]
            convs.extend(stage)
            self.stages.append(stage)
            prev = c
        self.convs = convs

    def forward(self, img: Tensor) -> List[Tensor]:
        h, w = self.cfg.image_size
        if img.shape != (self.in_channels, h, w):
            raise ShapeError(f"encoder expects image of shape {(self.in_channels, h, w)}, got {img.shape}")
        maps, x = [], img
        for stage in self.stages:
            for conv in stage:
                x = conv(x)
            maps.append(x)
        return maps

    def pre_activations(self, img: Tensor) -> List[Tensor]:
        """Last conv of each scale before its activation (linear-probe introspection)."""
        maps, x = [], img
        for stage in self.stages:
            for conv in stage[:-1]:
                x = conv(x)
            pre = stage[-1].pre_activation(x)
            maps.append(pre)
            x = _activate(pre, stage[-1].activation)
        return maps


class PointMLPEncoder(Module):
    """Per-point MLP; block i maps the previous block output to ``channels[i]`` features."""

    def __init__(self, cfg: EncoderConfig, layers_per_block: int = 2, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.blocks: List[List[Linear]] = []
        prev = 3
        flat = []
        for c in cfg.channels:
            block = [Linear(prev, c, "relu", rng=rng, dtype=dtype)]
            block += [Linear(c, c, "relu", rng=rng, dtype=dtype) for _ in range(layers_per_block - 1)]
            self.blocks.append(block)
            flat.extend(block)
            prev = c
        self.layers = flat

    def forward(self, cloud: Tensor) -> List[Tensor]:
        if cloud.ndim != 2 or cloud.shape[1] != 3:
            raise ShapeError(f"point encoder expects (N, 3), got {cloud.shape}")
        feats, x = [], cloud
        for block in self.blocks:
            for layer in block:
                x = layer(x)
            feats.append(x)
        return feats


def image_encoder(img: Tensor, encoder: ImageEncoder) -> List[Tensor]:
    return encoder(img)


def point_mlp_encoder(cloud: Tensor, encoder: PointMLPEncoder) -> List[Tensor]:
    return encoder(cloud)
