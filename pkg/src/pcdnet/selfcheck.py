"""Finite-difference gradient suite over every differentiable op and whole models.

Used by the ``gradcheck`` command and the test suite. Everything runs in
float64; inputs are drawn away from kinks (relu at 0, integer sample
coordinates, clamped borders) so central differences are meaningful.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .blending import CameraIntrinsics, adain_2d_to_3d, blend, project_points
from .gradcheck import check_gradients
from .layers import GraphX, GraphXSlim, Linear, ResBlock
from .losses import chamfer, l2_penalty
from .model import VARIANTS, PCDNet, init_point_cloud, tiny_config
from .tensor import Tensor

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self) -> str:
        flag = "ok  " if self.passed else "FAIL"
        return f"{flag} {self.name:<34} rel.err {self.error:.2e} (tol {self.tol:g}) {self.seconds:.2f}s"


def _leaf(rng, shape, low=-1.0, high=1.0, avoid=None) -> Tensor:
    a = rng.uniform(low, high, size=shape)
    if avoid is not None:  # push values off a kink
        a = np.where(np.abs(a - avoid) < 0.05, a + 0.1, a)
    return Tensor(a, requires_grad=True, dtype=np.float64)


def _weighted(out_fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Scalarize with fixed random weights so every output entry matters."""
    cache = {}

    def fn():
        out = out_fn()
        if "w" not in cache:
            cache["w"] = Tensor(rng.uniform(0.5, 1.5, size=out.shape), dtype=np.float64)
        return (out * cache["w"]).sum()

    return fn


def op_cases(rng) -> List[Tuple[str, Callable[[], Tensor], Sequence[Tensor]]]:
    cases = []

    def add_case(name, out_fn, inputs):
        cases.append((name, _weighted(out_fn, rng), inputs))

    a, b, r = _leaf(rng, (4, 5)), _leaf(rng, (1, 5)), _leaf(rng, (4, 1))
    pos = _leaf(rng, (4, 5), 0.5, 2.0)
    add_case("add (broadcast)", lambda: T.add(a, b), [a, b])
    add_case("sub (broadcast)", lambda: T.sub(r, a), [r, a])
    add_case("mul (broadcast)", lambda: T.mul(a, r), [a, r])
    add_case("div", lambda: T.div(a, pos), [a, pos])
    add_case("scale", lambda: T.scale(a, -2.5), [a])
    k = _leaf(rng, (4, 5), avoid=0.0)
    add_case("relu", lambda: T.relu(k), [k])
    add_case("sqrt", lambda: T.sqrt(pos), [pos])
    m1, m2 = _leaf(rng, (3, 4)), _leaf(rng, (4, 6))
    add_case("matmul", lambda: T.matmul(m1, m2), [m1, m2])
    c = _leaf(rng, (3, 4, 5))
    add_case("sum (axis)", lambda: T.sum_(c, axis=1), [c])
    add_case("sum (all)", lambda: T.sum_(c), [c])
    add_case("mean (axes)", lambda: T.mean(c, axis=(0, 2), keepdims=True), [c])
    add_case("sorted_sum", lambda: T.sorted_sum(c, axis=0), [c])
    add_case("reduce_stats mean", lambda: T.reduce_stats(c, (1, 2))[0], [c])
    add_case("reduce_stats std", lambda: T.reduce_stats(c, (1, 2))[1], [c])
    add_case("reduce_stats std (canonical)", lambda: T.reduce_stats(c, 0, canonical=True)[1], [c])
    add_case("reshape", lambda: T.reshape(c, (12, 5)), [c])
    add_case("transpose", lambda: T.transpose(c, (2, 0, 1)), [c])
    add_case("getitem (slice)", lambda: T.getitem(c, (slice(None), slice(1, 3))), [c])
    idx = np.array([0, 2, 2, 1])
    add_case("getitem (gather)", lambda: T.getitem(a, idx), [a])
    add_case("concat", lambda: T.concat([a, pos, T.transpose(m1, (1, 0))], axis=1), [a, pos, m1])

    img = _leaf(rng, (2, 7, 6))
    ker = _leaf(rng, (3, 2, 3, 3))
    add_case("conv2d stride 1 pad 1", lambda: T.conv2d(img, ker, stride=1, pad=1), [img, ker])
    add_case("conv2d stride 2 pad 1", lambda: T.conv2d(img, ker, stride=2, pad=1), [img, ker])
    add_case("conv2d stride 1 pad 0", lambda: T.conv2d(img, ker, stride=1, pad=0), [img, ker])

    fmap = _leaf(rng, (3, 6, 7))
    uv = rng.uniform(0.2, 5.8, size=(9, 2)) * [1.0, 4.8 / 5.8]
    uv = np.floor(uv) + np.clip(uv - np.floor(uv), 0.1, 0.9)  # stay off cell boundaries
    coords = Tensor(uv, requires_grad=True, dtype=np.float64)
    add_case("bilinear_sample", lambda: T.bilinear_sample(fmap, coords), [fmap, coords])

    cam = CameraIntrinsics.default((16, 16))
    cloud = Tensor(init_point_cloud(10, cam, (16, 16), rng, np.float64).data, requires_grad=True)
    add_case("project_points", lambda: project_points(cloud, cam, (4, 4), (16, 16)), [cloud])
    x_map, y_pts = _leaf(rng, (4, 5, 5)), _leaf(rng, (10, 4))
    add_case("adain_2d_to_3d", lambda: adain_2d_to_3d(x_map, y_pts), [x_map, y_pts])

    # keep projected samples inside the maps and off integer grid lines
    # (8x8 map coordinate 2k + f, f in [0.2, 0.8], is also off-grid on the 4x4 map)
    fine = 2 * rng.integers(1, 3, size=(8, 2)) + rng.uniform(0.2, 0.8, size=(8, 2))
    z = rng.uniform(1.8, 2.2, 8)
    uv_img = fine * 2.0
    pts = np.stack([(uv_img[:, 0] - cam.cx) * z / cam.fx, (uv_img[:, 1] - cam.cy) * z / cam.fy, z], axis=1)
    bcloud = Tensor(pts, requires_grad=True)
    pyr = [_leaf(rng, (2, 8, 8)), _leaf(rng, (3, 4, 4))]
    feats = [_leaf(rng, (8, 2)), _leaf(rng, (8, 3))]
    add_case("blend (full)", lambda: blend(bcloud, cam, pyr, feats, (16, 16), "full"),
             [bcloud] + pyr + feats)

    lin = Linear(5, 4, "identity", rng, np.float64)
    add_case("linear", lambda: lin(a), [a, lin.weight, lin.bias])
    for name, n_in, n_out, rank in (("graphx dense", 6, 6, None), ("graphx upsample", 4, 7, None),
                                    ("graphx factored", 5, 3, 2)):
        layer = GraphX(n_in, n_out, 5, 4, rank=rank, rng=rng, dtype=np.float64)
        layer.mixing_bias.data[:] = rng.uniform(-0.5, 0.5, n_out)
        x = _leaf(rng, (n_in, 5))
        add_case(name, lambda layer=layer, x=x: layer(x), [x] + layer.parameters())
    slim = GraphXSlim(5, 8, 5, 4, rng=rng, dtype=np.float64)
    xs = _leaf(rng, (5, 5))
    add_case("graphx slim", lambda: slim(xs), [xs] + slim.parameters())
    for mixer, residual in (("graphx", "graphx"), ("fc", "fc"), ("slim", "graphx")):
        n_out = 6 if residual == "graphx" else 4
        blk = ResBlock(4, n_out, 5, 3, mixer=mixer, residual=residual, rng=rng, dtype=np.float64)
        xb = _leaf(rng, (4, 5))
        add_case(f"resblock {mixer}/{residual}", lambda blk=blk, xb=xb: blk(xb), [xb] + blk.parameters())

    X = _leaf(rng, (12, 3))
    Y = _leaf(rng, (9, 3))
    cases.append(("chamfer", lambda: chamfer(X, Y), [X, Y]))
    ps = [_leaf(rng, (3, 2)), _leaf(rng, (4,))]
    cases.append(("l2_penalty", lambda: l2_penalty(ps, 1e-2), ps))
    return cases


def model_case(variant: str, rng) -> Tuple[str, Callable[[], Tensor], Sequence[Tensor]]:
    """Chamfer loss of the tiny model (two scales, widths 16/8, 32 points) vs a random target."""
    cfg = tiny_config(variant, dtype="f64")
    model = PCDNet(cfg, rng=rng)
    for _, p in model.named_parameters():  # non-zero biases exercise every path
        if not p.data.any():
            p.data[:] = rng.uniform(-0.1, 0.1, size=p.shape)
    image = Tensor(rng.uniform(0, 1, size=(1,) + cfg.image_size), dtype=np.float64)
    cloud = init_point_cloud(model.n_in, model.cam, cfg.image_size, rng, np.float64)
    target = Tensor(rng.normal([0, 0, 2], 0.3, size=(48, 3)), dtype=np.float64)
    return f"model {variant}", lambda: chamfer(model(image, cloud), target), model.parameters()


def run_suite(seed: int = 0, models: Sequence[str] = VARIANTS, max_entries: int = 12,
              report: Callable[[str], None] = None) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    jobs = [(n, f, i, OP_TOL) for n, f, i in op_cases(rng)]
    jobs += [model_case(v, rng) + (MODEL_TOL,) for v in models]
    for name, fn, inputs, tol in jobs:
        t0 = time.perf_counter()
        cap = None if tol == OP_TOL else max_entries
        err = check_gradients(fn, inputs, step=1e-5, max_entries=cap, rng=rng, kink_retries=2)
        res = CheckResult(name, err, tol, time.perf_counter() - t0)
        results.append(res)
        if report is not None:
            report(res.line())
    return results
