"""Chamfer distance, voxel IoU and L2 regularization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor


def sqdist(diff: np.ndarray) -> np.ndarray:
    """Squared norm over the last axis (length 3) in a fixed summation order."""
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


@dataclass(frozen=True)
class NNBackend:
    kind: str = "brute_force"
    cell_size: Optional[float] = None  # grid mode; None -> bbox diagonal / 32

    def __post_init__(self):
        if self.kind not in ("brute_force", "uniform_grid"):
            raise ConfigError(f"unknown nearest-neighbour backend {self.kind!r}")
        if self.cell_size is not None and not self.cell_size > 0:
            raise ConfigError("cell_size must be positive")

    def nearest(self, queries: np.ndarray, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self.kind == "brute_force":
            return nearest_brute_force(queries, points)
        return UniformGrid(points, self.cell_size).query(queries)


def nearest_brute_force(queries: np.ndarray, points: np.ndarray, block: int = 2048):
    """Index and squared distance of each query's nearest point (lowest index on ties)."""
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries), dtype=np.result_type(queries, points))
    for s in range(0, len(queries), block):
        q = queries[s:s + block]
        d = sqdist(q[:, None, :] - points[None, :, :])
        j = np.argmin(d, axis=1)
        idx[s:s + block] = j
        dist[s:s + block] = d[np.arange(len(q)), j]
    return idx, dist


class UniformGrid:
    """Exact nearest-neighbour search over a uniform cell grid.

    Occupied cells are visited in order of Chebyshev ring distance from the
    query cell; the search stops once no unvisited ring can hold a point
    closer than the current best.
    """

    def __init__(self, points: np.ndarray, cell_size: Optional[float] = None):
        points = np.asarray(points)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ShapeError(f"grid needs a nonempty (M, 3) array, got {points.shape}")
        self.points = points
        self.lo = points.min(axis=0).astype(np.float64)
        if cell_size is None:
            diag = float(np.linalg.norm(points.max(axis=0) - self.lo))
            cell_size = diag / 32 if diag > 0 else 1.0
        self.cell = float(cell_size)
        cells = np.floor((points - self.lo) / self.cell).astype(np.int64)
        keys, inverse = np.unique(cells, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(keys) + 1))
        self.keys = keys
        self.members = [order[bounds[i]:bounds[i + 1]] for i in range(len(keys))]

    def _query_one(self, x: np.ndarray) -> Tuple[int, float]:
        qc = np.floor((x - self.lo) / self.cell).astype(np.int64)
        ring = np.abs(self.keys - qc).max(axis=1)
        best_i, best_d = -1, np.inf
        for r in np.unique(ring):
            if best_i >= 0:
                # every point in rings >= r lies outside the block of rings < r
                lo = self.lo + (qc - r + 1) * self.cell
                hi = self.lo + (qc + r) * self.cell
                gap = float(min(np.min(x - lo), np.min(hi - x)))
                if gap > 0 and best_d < gap * gap * (1 - 1e-9):
                    break
            cand = np.concatenate([self.members[c] for c in np.flatnonzero(ring == r)])
            d = sqdist(self.points[cand] - x)
            k = np.lexsort((cand, d))[0]
            if d[k] < best_d or (d[k] == best_d and cand[k] < best_i):
                best_i, best_d = int(cand[k]), d[k]
        return best_i, best_d

    def query(self, queries: np.ndarray):
        queries = np.asarray(queries)
        idx = np.empty(len(queries), dtype=np.int64)
        dist = np.empty(len(queries), dtype=np.result_type(queries, self.points))
        for i, x in enumerate(queries):
            idx[i], dist[i] = self._query_one(x)
        return idx, dist


def _check_cloud(x: Tensor, name: str):
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeError(f"{name} must have shape (N, 3), got {x.shape}")
    if x.shape[0] == 0:
        raise DomainError(f"{name} is empty")


def chamfer(X: Tensor, Y: Tensor, backend: NNBackend = NNBackend()) -> Tensor:
    """Symmetric mean squared nearest-neighbour distance between two point sets.

    The backward pass holds the nearest-neighbour pairing fixed.
    """
    X, Y = T.astensor(X), T.astensor(Y)
    _check_cloud(X, "X")
    _check_cloud(Y, "Y")
    xd, yd = X.data, Y.data
    nn_xy, d_xy = backend.nearest(xd, yd)
    nn_yx, d_yx = backend.nearest(yd, xd)
    n, m = len(xd), len(yd)
    # sorted sums keep the value exactly invariant to point order
    value = np.sort(d_xy).sum() / n + np.sort(d_yx).sum() / m
    dtype = np.result_type(xd, yd)

    def backward(g):
        r_xy = xd - yd[nn_xy]   # x - y*(x)
        r_yx = yd - xd[nn_yx]   # y - x*(y)
        gx = gy = None
        if X.requires_grad:
            gx = (2.0 / n) * r_xy
            np.add.at(gx, nn_yx, -(2.0 / m) * r_yx)
            gx = (g * gx).astype(X.dtype)
        if Y.requires_grad:
            gy = (2.0 / m) * r_yx
            np.add.at(gy, nn_xy, -(2.0 / n) * r_xy)
            gy = (g * gy).astype(Y.dtype)
        return gx, gy

    return Tensor._make(np.asarray(value, dtype=dtype), (X, Y), backward, "chamfer")


def chamfer_value(X, Y, backend: NNBackend = NNBackend()) -> float:
    with T.no_grad():
        return chamfer(T.astensor(np.asarray(getattr(X, "data", X))),
                       T.astensor(np.asarray(getattr(Y, "data", Y))), backend).item()


# ---------------------------------------------------------------------------
# voxel IoU
# ---------------------------------------------------------------------------

@dataclass
class VoxelGrid:
    resolution: int
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def joint(cls, *clouds: np.ndarray, resolution: int = 32, margin: float = 0.02) -> "VoxelGrid":
        """Union bounding box of ``clouds`` grown by ``margin`` of its extent (split over both sides)."""
        pts = np.concatenate([np.asarray(c, dtype=np.float64).reshape(-1, 3) for c in clouds])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        extent = hi - lo
        if np.any(extent <= 0):
            raise DomainError(f"degenerate bounding box with extent {extent.tolist()}")
        pad = extent * margin / 2
        return cls(resolution, lo - pad, hi + pad)

    def cells(self, cloud: np.ndarray) -> np.ndarray:
        """Flat cell index per point; points on the max face go to the last cell."""
        cloud = np.asarray(cloud, dtype=np.float64)
        r = self.resolution
        ijk = np.floor((cloud - self.lo) / (self.hi - self.lo) * r).astype(np.int64)
        ijk = np.clip(ijk, 0, r - 1)
        return (ijk[:, 0] * r + ijk[:, 1]) * r + ijk[:, 2]

    def occupancy(self, cloud: np.ndarray) -> np.ndarray:
        occ = np.zeros(self.resolution ** 3, dtype=bool)
        occ[self.cells(cloud)] = True
        return occ.reshape((self.resolution,) * 3)


def iou_voxel(X, Y, resolution: int = 32) -> float:
    X = np.asarray(getattr(X, "data", X))
    Y = np.asarray(getattr(Y, "data", Y))
    if len(X) == 0 or len(Y) == 0:
        raise DomainError("IoU needs nonempty point sets")
    grid = VoxelGrid.joint(X, Y, resolution=resolution)
    a, b = grid.occupancy(X), grid.occupancy(Y)
    return float(np.logical_and(a, b).sum() / np.logical_or(a, b).sum())


# ---------------------------------------------------------------------------
# regularization
# ---------------------------------------------------------------------------

def l2_penalty(params: Iterable[Tensor], lam: float = 1e-5) -> Tensor:
    params = list(params)
    if not params:
        return Tensor(0.0)
    terms = [T.sum_(p * p) for p in params]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.scale(total, lam)
