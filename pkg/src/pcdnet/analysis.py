"""Introspection experiments: latent interpolation, mixing matrices, complexity, ablations."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import pcdt
from . import tensor as T
from .data import Sample, categories_of
from .errors import ContractError
from .layers import GraphX, GraphXSlim, Linear, ResBlock
from .model import ModelConfig, PCDNet
from .tensor import Tensor
from .training import MetricsTable, TrainConfig, evaluate, train


# ---------------------------------------------------------------------------
# latent interpolation
# ---------------------------------------------------------------------------

@dataclass
class LatentCode:
    features: np.ndarray  # (N, D) blended features
    cloud_digest: str
    config_digest: str


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes() + str(arr.shape).encode()).hexdigest()[:16]


def encode_latent(model: PCDNet, image, cloud) -> LatentCode:
    cloud = np.asarray(getattr(cloud, "data", cloud))
    with T.no_grad():
        feats = model.encode(image, cloud).data
    return LatentCode(feats, _digest(cloud.astype(model.dtype)), model.cfg.digest())


def decode_latent(model: PCDNet, features: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return model.decode(Tensor(features, dtype=model.dtype)).data


def bilinear_weights(s: float, t: float) -> Tuple[float, float, float, float]:
    """Weights of the (top-left, top-right, bottom-left, bottom-right) corners."""
    return (1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t


def bilinear_code(codes: Sequence[LatentCode], s: float, t: float) -> np.ndarray:
    if len(codes) != 4:
        raise ContractError(f"bilinear interpolation needs 4 corner codes, got {len(codes)}")
    ref = codes[0]
    for i, c in enumerate(codes[1:], start=1):
        if c.cloud_digest != ref.cloud_digest or c.config_digest != ref.config_digest:
            raise ContractError(f"corner {i} was encoded with a different initial cloud or model config")
        if c.features.shape != ref.features.shape:
            raise ContractError(f"corner {i} has shape {c.features.shape}, expected {ref.features.shape}")
    out = None
    for w, c in zip(bilinear_weights(s, t), codes):
        if w == 0:
            continue  # keeps corner codes bit-identical to their inputs
        term = c.features if w == 1 else w * c.features
        out = term.copy() if out is None else out + term
    return out


@dataclass
class InterpolationResult:
    clouds: np.ndarray  # (grid, grid, n_out, 3)
    params: np.ndarray  # (grid,) interpolation coordinates along each axis
    corners_direct: List[np.ndarray]  # direct forward passes for the 4 images


def interpolate_latents(model: PCDNet, images: Sequence, cloud, grid: int = 8) -> InterpolationResult:
    """Decode a grid x grid convex collection of codes spanned by four corner images."""
    if len(images) != 4:
        raise ContractError(f"need exactly 4 corner images, got {len(images)}")
    cloud = np.asarray(getattr(cloud, "data", cloud))
    codes = [encode_latent(model, img, cloud) for img in images]
    with T.no_grad():
        direct = [model(img, Tensor(cloud, dtype=model.dtype)).data for img in images]
    ts = np.linspace(0.0, 1.0, grid)
    clouds = np.empty((grid, grid, model.n_out, 3), dtype=model.dtype)
    for r, tv in enumerate(ts):
        for c, sv in enumerate(ts):
            clouds[r, c] = decode_latent(model, bilinear_code(codes, float(sv), float(tv)))
    return InterpolationResult(clouds, ts, direct)


# ---------------------------------------------------------------------------
# mixing matrix inspection
# ---------------------------------------------------------------------------

@dataclass
class MixingReport:
    matrix: np.ndarray
    row_mean: np.ndarray
    row_var: np.ndarray
    singular_values: np.ndarray
    numerical_rank: int
    rank_tol: float

    def summary(self) -> str:
        sv = self.singular_values
        top = ", ".join(f"{v:.4g}" for v in sv[:5])
        return (f"mixing matrix {self.matrix.shape[0]}x{self.matrix.shape[1]}\n"
                f"numerical rank: {self.numerical_rank} (singular values > {self.rank_tol:g} * max)\n"
                f"top singular values: {top}\n"
                f"mean per-row variance: {float(self.row_var.mean()):.6g}\n"
                f"energy in first singular value: {float(sv[0] ** 2 / max((sv ** 2).sum(), 1e-300)):.4f}\n")

    def save(self, directory, stem: str = "mixing") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        pcdt.save(directory / f"{stem}_matrix.pcdt", self.matrix)
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["row", "mean", "variance"])
        for i, (m, v) in enumerate(zip(self.row_mean, self.row_var)):
            w.writerow([i, repr(float(m)), repr(float(v))])
        pcdt.atomic_write_bytes(directory / f"{stem}_rows.csv", out.getvalue().encode())
        sv = "\n".join(repr(float(v)) for v in self.singular_values) + "\n"
        pcdt.atomic_write_bytes(directory / f"{stem}_singular_values.txt", sv.encode())
        pcdt.atomic_write_bytes(directory / f"{stem}_summary.txt", self.summary().encode())


def inspect_mixing(layer, rank_tol: float = 1e-3) -> MixingReport:
    """Row statistics and singular spectrum of a GraphX mixing matrix (or a raw matrix)."""
    mat = layer.mixing_weight.data if isinstance(layer, GraphX) else np.asarray(getattr(layer, "data", layer))
    mat = np.asarray(mat, dtype=np.float64)
    sv = np.linalg.svd(mat, compute_uv=False)
    rank = int(np.sum(sv > rank_tol * sv[0])) if sv.size and sv[0] > 0 else 0
    return MixingReport(mat, mat.mean(axis=1), mat.var(axis=1), sv, rank, rank_tol)


# ---------------------------------------------------------------------------
# parameter / multiply-accumulate counting
# ---------------------------------------------------------------------------

@dataclass
class LayerCount:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    layers: List[LayerCount]

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    def to_text(self) -> str:
        lines = [f"{'layer':<34} {'kind':<12} {'params':>12} {'macs':>15}"]
        for l in self.layers:
            lines.append(f"{l.name:<34} {l.kind:<12} {l.params:>12,d} {l.macs:>15,d}")
        lines.append(f"{'total':<34} {'':<12} {self.total_params:>12,d} {self.total_macs:>15,d}")
        return "\n".join(lines) + "\n"


def _count_module(name, mod, n_points, out: List[LayerCount]) -> int:
    """Append counts for ``mod`` applied to ``n_points`` rows; returns the output row count."""
    if isinstance(mod, Linear):
        p, m = mod.count(n_points)
        out.append(LayerCount(name, "fc", p, m))
        return n_points
    if isinstance(mod, (GraphX, GraphXSlim)):
        p, m = mod.count()
        out.append(LayerCount(name, "graphx" if isinstance(mod, GraphX) else "graphx_slim", p, m))
        return mod.n_out
    if isinstance(mod, ResBlock):
        _count_module(f"{name}.fc", mod.fc, n_points, out)
        n_out = _count_module(f"{name}.mixer", mod.mixer, n_points, out)
        if mod.residual is not None:
            _count_module(f"{name}.residual", mod.residual, n_points, out)
        return n_out
    raise TypeError(f"cannot count {type(mod).__name__}")


def count_params_macs(model: PCDNet) -> ComplexityReport:
    """Analytic per-layer counts; depends only on the configuration."""
    layers: List[LayerCount] = []
    h, w = model.cfg.image_size
    for si, stage in enumerate(model.image_encoder.stages):
        for ci, conv in enumerate(stage):
            h = (h + 2 * conv.pad - conv.k) // conv.stride + 1
            w = (w + 2 * conv.pad - conv.k) // conv.stride + 1
            p, m = conv.count(h, w)
            layers.append(LayerCount(f"image_encoder.scale{si}.conv{ci}", "conv", p, m))
    n = model.n_in
    for bi, block in enumerate(model.point_encoder.blocks):
        for li, lin in enumerate(block):
            _count_module(f"point_encoder.block{bi}.fc{li}", lin, n, layers)
    for bi, block in enumerate(model.blocks):
        n = _count_module(f"deform.block{bi}", block, n, layers)
    _count_module("head", model.head, n, layers)
    return ComplexityReport(layers)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationReport:
    tables: Dict[str, MetricsTable]  # feature mode -> metrics
    categories: List[str]

    def grid(self, metric: str) -> List[List[float]]:
        col = 1 if metric == "cd" else 2
        out = []
        for mode in FEATURE_MODES_ORDER:
            t = self.tables[mode]
            out.append([t.row(c)[col - 1] for c in self.categories] + [t.mean[col - 1]])
        return out

    def to_text(self) -> str:
        head = f"{'':<6}{'features':<17}" + "".join(f"{c:>10}" for c in self.categories) + f"{'mean':>10}"
        lines = [head]
        for metric, label in (("cd", "CD"), ("iou", "IoU")):
            for mode, vals in zip(FEATURE_MODES_ORDER, self.grid(metric)):
                lines.append(f"{label:<6}{mode:<17}" + "".join(f"{v:>10.4f}" for v in vals))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["metric", "features"] + self.categories + ["mean"])
        for metric in ("cd", "iou"):
            for mode, vals in zip(FEATURE_MODES_ORDER, self.grid(metric)):
                w.writerow([metric, mode] + [repr(v) for v in vals])
        return out.getvalue()


FEATURE_MODES_ORDER = ("projection_only", "adain_only", "full")


def ablation_run(train_set: Sequence[Sample], test_set: Sequence[Sample], model_cfg: ModelConfig,
                 train_cfg: TrainConfig, run_dir=None) -> AblationReport:
    """Train one model per feature composition, identical otherwise, and tabulate CD / IoU."""
    tables = {}
    for mode in FEATURE_MODES_ORDER:
        cfg = replace(model_cfg, feature_mode=mode)
        model = PCDNet(cfg, rng=np.random.default_rng([train_cfg.seed, 0]))
        sub = Path(run_dir) / mode if run_dir is not None else None
        train(model, train_set, train_cfg, run_dir=sub)
        tables[mode] = evaluate(model, test_set, seed=train_cfg.seed)
        if sub is not None:
            tables[mode].save(sub)
    report = AblationReport(tables, categories_of(test_set))
    if run_dir is not None:
        pcdt.atomic_write_bytes(Path(run_dir) / "ablation.txt", report.to_text().encode())
        pcdt.atomic_write_bytes(Path(run_dir) / "ablation.csv", report.to_csv().encode())
    return report
