"""Training recipe, checkpoints and evaluation."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import pcdt
from . import tensor as T
from .data import Sample, categories_of
from .errors import ConfigError, SerializationError, TrainingDiverged
from .losses import NNBackend, chamfer, chamfer_value, iou_voxel, l2_penalty
from .model import ModelConfig, PCDNet, init_point_cloud, predict

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_FIELDS = ("step", "epoch", "lr", "chamfer", "l2", "total")

# Random streams are derived from (seed, stream id, counter), so the full RNG
# state at any step is the seed plus the step/epoch counters.
STREAM_INIT, STREAM_SHUFFLE, STREAM_CLOUD, STREAM_EVAL = 0, 1, 2, 3


@dataclass
class TrainConfig:
    lr: float = 5e-5
    lr_decay: float = 0.3
    milestones: Optional[Tuple[int, ...]] = None  # epochs; None -> 50% and 80% of epochs
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 1e-5
    batch_size: int = 4
    epochs: int = 10
    max_steps: Optional[int] = None
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0  # steps; 0 -> final checkpoint only
    nn_backend: str = "brute_force"

    def __post_init__(self):
        if self.milestones is not None:
            self.milestones = tuple(int(m) for m in self.milestones)
        if self.lr < 0 or self.l2 < 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr and l2 must be >= 0 and lr_decay in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps > 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        for m in self.milestones or ():
            if not 0 < m < max(self.epochs, 1):
                raise ConfigError(f"milestone {m} outside epoch range (0, {self.epochs})")
        NNBackend(self.nn_backend)

    def resolved_milestones(self) -> Tuple[int, ...]:
        if self.milestones is not None:
            return self.milestones
        cand = (math.floor(self.epochs * 0.5), math.floor(self.epochs * 0.8))
        return tuple(sorted({m for m in cand if 0 < m < self.epochs}))

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.resolved_milestones() if epoch >= m)
        return self.lr * self.lr_decay ** passed

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["milestones"] is not None:
            d["milestones"] = list(d["milestones"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params: Sequence[T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    step: int = 0
    epoch: int = 0

    def header(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "adam_t": self.adam_t,
            "rng": {"seed": self.train_config.seed, "streams": "numpy default_rng([seed, stream, counter])",
                    "next_step": self.step},
            "params": list(self.params),
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
            def put(name, data):
                info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, data)
            put("header.json", json.dumps(self.header(), indent=1, sort_keys=True))
            for prefix, group in (("params", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
                for name, arr in group.items():
                    put(f"{prefix}/{name}.pcdt", pcdt.to_bytes(arr))
        return buf.getvalue()

    def save(self, path) -> None:
        pcdt.atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            zf = zipfile.ZipFile(path)
        except (OSError, zipfile.BadZipFile) as exc:
            raise SerializationError(f"cannot read checkpoint {path}: {exc}") from None
        with zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format_version") != CHECKPOINT_VERSION:
                raise SerializationError(f"unsupported checkpoint version {header.get('format_version')!r}")
            names = set(zf.namelist())

            def group(prefix):
                return {n: pcdt.from_bytes(zf.read(f"{prefix}/{n}.pcdt"))
                        for n in header["params"] if f"{prefix}/{n}.pcdt" in names}

            return cls(ModelConfig.from_dict(header["model_config"]),
                       TrainConfig.from_dict(header["train_config"]),
                       group("params"), group("adam_m"), group("adam_v"),
                       header["adam_t"], header["step"], header["epoch"])

    def build_model(self) -> PCDNet:
        model = PCDNet(self.model_config)
        load_params(model, self.params)
        return model


def load_params(model: PCDNet, params: Dict[str, np.ndarray]) -> None:
    named = dict(model.named_parameters())
    missing = set(named) - set(params)
    if missing:
        raise SerializationError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in named.items():
        if params[name].shape != p.shape:
            raise SerializationError(f"parameter {name}: checkpoint shape {params[name].shape} != {p.shape}")
        p.data = np.array(params[name], dtype=p.dtype)


def make_checkpoint(model: PCDNet, cfg: TrainConfig, opt: Optional[Adam], step: int, epoch: int) -> Checkpoint:
    named = model.named_parameters()
    params = {n: p.data.copy() for n, p in named}
    m = v = {}
    t = 0
    if opt is not None:
        m = {n: a.copy() for (n, _), a in zip(named, opt.m)}
        v = {n: a.copy() for (n, _), a in zip(named, opt.v)}
        t = opt.t
    return Checkpoint(model.cfg, cfg, params, m, v, t, step, epoch)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: List[dict]

    @property
    def chamfer_curve(self) -> np.ndarray:
        return np.array([r["chamfer"] for r in self.losses])


def _blas_guard(deterministic: bool):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not deterministic:
        return contextlib.nullcontext()
    return threadpool_limits(1)


def write_loss_csv(path, rows: Sequence[dict]) -> None:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LOSS_FIELDS)
    for r in rows:
        w.writerow([r["step"], r["epoch"], repr(r["lr"]), repr(r["chamfer"]), repr(r["l2"]), repr(r["total"])])
    pcdt.atomic_write_bytes(path, out.getvalue().encode())


def read_loss_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"step": int(r["step"]), "epoch": int(r["epoch"]), "lr": float(r["lr"]),
             "chamfer": float(r["chamfer"]), "l2": float(r["l2"]), "total": float(r["total"])} for r in rows]


def _layer_norms(model: PCDNet) -> str:
    return ", ".join(f"{n}={float(np.linalg.norm(p.data)):.3g}" for n, p in model.named_parameters())


def train(model: PCDNet, dataset: Sequence[Sample], cfg: TrainConfig, run_dir=None,
          resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None) -> TrainResult:
    """Minimize mean Chamfer distance + L2 penalty with Adam.

    A fresh initial cloud is drawn per batch item and step. ``stop_at``
    interrupts after that many total steps (used to test resumption).
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    backend = NNBackend(cfg.nn_backend)
    named = model.named_parameters()
    params = [p for _, p in named]
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    end = total if stop_at is None else min(total, stop_at)

    rows: List[dict] = []
    step = 0
    run_dir = Path(run_dir) if run_dir is not None else None
    if resume is not None:
        load_params(model, resume.params)
        names = [n for n, _ in named]
        if resume.adam_m:
            opt.m = [np.array(resume.adam_m[n]) for n in names]
            opt.v = [np.array(resume.adam_v[n]) for n in names]
        opt.t = resume.adam_t
        step = resume.step
        if run_dir is not None and (run_dir / "loss.csv").exists():
            rows = [r for r in read_loss_csv(run_dir / "loss.csv") if r["step"] <= step]
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    image_shape = model.cfg.image_size
    with _blas_guard(cfg.deterministic):
        while step < end:
            epoch = step // steps_per_epoch
            pos = step % steps_per_epoch
            order = np.random.default_rng([cfg.seed, STREAM_SHUFFLE, epoch]).permutation(len(dataset))
            batch = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            cloud_rng = np.random.default_rng([cfg.seed, STREAM_CLOUD, step])
            lr = cfg.lr_at(epoch)

            cd_total = None
            for i in batch:
                s = dataset[i]
                cloud = init_point_cloud(model.n_in, model.cam, image_shape, cloud_rng, model.dtype)
                cd = chamfer(model(s.image, cloud), T.Tensor(s.gt_cloud, dtype=model.dtype), backend)
                cd_total = cd if cd_total is None else cd_total + cd
            cd_mean = T.scale(cd_total, 1.0 / len(batch))
            reg = l2_penalty(params, cfg.l2)
            loss = cd_mean + reg
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss {loss.item()!r} at step {step + 1} "
                                       f"(epoch {epoch}); parameter norms: {_layer_norms(model)}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            step += 1
            rows.append({"step": step, "epoch": epoch, "lr": float(lr), "chamfer": cd_mean.item(),
                         "l2": reg.item(), "total": loss.item()})
            if run_dir is not None:
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    ckpt = make_checkpoint(model, cfg, opt, step, step // steps_per_epoch)
                    ckpt.save(run_dir / "checkpoints" / f"step_{step:06d}.pcdc")
                    ckpt.save(run_dir / "checkpoints" / "last.pcdc")
                    write_loss_csv(run_dir / "loss.csv", rows)
            if step % 50 == 0:
                logger.info("step %d epoch %d lr %.3g chamfer %.5f", step, epoch, lr, rows[-1]["chamfer"])

    ckpt = make_checkpoint(model, cfg, opt, step, step // steps_per_epoch)
    if run_dir is not None:
        ckpt.save(run_dir / "checkpoints" / "last.pcdc")
        write_loss_csv(run_dir / "loss.csv", rows)
    return TrainResult(ckpt, rows)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsTable:
    """Per-category mean CD / IoU plus a final row averaging over categories."""

    rows: List[Tuple[str, float, float, int]]  # (category, cd, iou, count), last row is "mean"

    @property
    def mean(self) -> Tuple[float, float]:
        return self.rows[-1][1], self.rows[-1][2]

    def row(self, category: str) -> Tuple[float, float]:
        for name, cd, iou, _ in self.rows:
            if name == category:
                return cd, iou
        raise KeyError(category)

    def to_text(self) -> str:
        lines = [f"{'category':<12} {'CD':>10} {'IoU':>8} {'n':>5}"]
        for name, cd, iou, n in self.rows:
            lines.append(f"{name:<12} {cd:>10.5f} {iou:>8.4f} {n:>5d}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["category", "cd", "iou", "count"])
        for name, cd, iou, n in self.rows:
            w.writerow([name, repr(cd), repr(iou), n])
        return out.getvalue()

    def save(self, directory, stem: str = "metrics") -> None:
        directory = Path(directory)
        pcdt.atomic_write_bytes(directory / f"{stem}.txt", self.to_text().encode())
        pcdt.atomic_write_bytes(directory / f"{stem}.csv", self.to_csv().encode())


def evaluate_predictor(predict_fn: Callable[[int, Sample], np.ndarray], samples: Sequence[Sample],
                       backend: NNBackend = NNBackend()) -> MetricsTable:
    per_cat: Dict[str, List[Tuple[float, float]]] = {}
    for i, s in enumerate(samples):
        pred = np.asarray(predict_fn(i, s))
        per_cat.setdefault(s.category, []).append((chamfer_value(pred, s.gt_cloud, backend),
                                                   iou_voxel(pred, s.gt_cloud)))
    rows = []
    for cat in categories_of(samples):
        vals = np.array(per_cat[cat])
        rows.append((cat, float(vals[:, 0].mean()), float(vals[:, 1].mean()), len(vals)))
    rows.append(("mean", float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])),
                 len(samples)))
    return MetricsTable(rows)


def evaluate(model: PCDNet, samples: Sequence[Sample], seed: int = 0,
             backend: NNBackend = NNBackend()) -> MetricsTable:
    def run(i, s):
        return predict(model, s.image, np.random.default_rng([seed, STREAM_EVAL, i]))

    return evaluate_predictor(run, samples, backend)
