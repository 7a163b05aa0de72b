"""Dense tensors with reverse-mode differentiation.

Every :class:`Tensor` wraps a contiguous row-major numpy buffer (float32 or
float64). Operations record their inputs and a backward closure; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into the ``grad`` buffers of leaf
tensors created with ``requires_grad=True``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, ShapeError

EPS_STD = 1e-5

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    if isinstance(dtype, str):
        dtype = DTYPES[dtype]
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return _contiguous(arr)


def _contiguous(arr) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to shape (1,)
    arr = np.asarray(arr)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _contiguous(data)
        out.grad = None
        out.op = op
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- differentiation -----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor with requires_grad=True")
        order = topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def astensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcastable") from None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dimension broadcast)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = astensor(a, like=b)
    if not isinstance(b, Tensor):
        b = astensor(b, like=a)
    _broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * a.data / b.data, b.shape)

    return Tensor._make(a.data / b.data, (a, b), backward, "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return Tensor._make(a.data * s, (a,), lambda g: (g * s,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale (b is a scalar) or relu (b unused)."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "relu":
        return relu(a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DomainError("mean over an empty extent")
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def sorted_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Sum whose result does not depend on the order of the reduced elements.

    Values are sorted along the reduced axes before summation, so any
    permutation of the input yields a bit-identical result.
    """
    axes = _norm_axes(axis, a.ndim)
    keep = tuple(i for i in range(a.ndim) if i not in axes)
    moved = np.transpose(a.data, keep + axes).reshape([a.shape[i] for i in keep] + [-1])
    total = np.sort(moved, axis=-1).sum(axis=-1)
    if keepdims:
        total = np.expand_dims(total, axes)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(total), (a,), backward, "sorted_sum")


def reduce_stats(x: Tensor, axes, keepdims=False, eps: float = EPS_STD, canonical: bool = False):
    """Mean and population std over ``axes``; std = sqrt(var + eps).

    ``canonical=True`` sums in sorted order, making both statistics exactly
    invariant to permutations along the reduced axes.
    """
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DomainError(f"reduce_stats over empty extent (shape {x.shape}, axes {axes})")
    total = sorted_sum if canonical else sum_
    mu = scale(total(x, axes, keepdims=True), 1.0 / count)
    centered = x - mu
    var = scale(total(centered * centered, axes, keepdims=True), 1.0 / count)
    std = sqrt(var + eps)
    if not keepdims:
        mu = reshape(mu, tuple(n for i, n in enumerate(x.shape) if i not in axes))
        std = reshape(std, mu.shape)
    return mu, std


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return Tensor._make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is not None and len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (a,), backward, "getitem")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one part")
    ref = parts[0].shape
    ax = axis % len(ref)
    for i, p in enumerate(parts):
        if p.ndim != len(ref) or any(p.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat part {i} has shape {p.shape}, incompatible with {ref} on axis {axis}")
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._make(np.concatenate([p.data for p in parts], axis=ax), parts, backward, "concat")


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    return concat([reshape(p, (1,) + p.shape) for p in parts], axis=0)


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of a (c_in, h, w) map with (c_out, c_in, kh, kw) kernels."""
    if x.ndim != 3 or k.ndim != 4 or x.shape[0] != k.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (c_in, ho, wo, kh, kw) -> (c_in*kh*kw, ho*wo)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * kh * kw, ho * wo)
    out = (k.data.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo)

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gk = (g2 @ cols.T).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (k.data.reshape(c_out, -1).T @ g2).reshape(c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, a, b]
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk

    return Tensor._make(out, (x, k), backward, "conv2d")


def bilinear_sample(fmap: Tensor, coords: Tensor) -> Tensor:
    """Sample a (c, h, w) map at continuous (u, v) pixel coordinates -> (N, c).

    u runs along width, v along height. Coordinates are clamped to
    [0, w-1] x [0, h-1]; the clamped part of a coordinate gets zero gradient.
    """
    if fmap.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: map {fmap.shape}, coords {coords.shape}")
    c, h, w = fmap.shape
    dtype = fmap.dtype
    cu, cv = coords.data[:, 0].astype(dtype), coords.data[:, 1].astype(dtype)
    u = np.clip(cu, 0, w - 1)
    v = np.clip(cv, 0, h - 1)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = (u - u0).astype(dtype)[:, None]
    b = (v - v0).astype(dtype)[:, None]
    flat = fmap.data.reshape(c, h * w).T  # (h*w, c)
    i00, i01, i10, i11 = v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1
    f00, f01, f10, f11 = flat[i00], flat[i01], flat[i10], flat[i11]
    # nested lerps reproduce constant regions exactly
    top = f00 + a * (f01 - f00)
    bottom = f10 + a * (f11 - f10)
    out = top + b * (bottom - top)
    inside_u = ((cu >= 0) & (cu <= w - 1)).astype(dtype)
    inside_v = ((cv >= 0) & (cv <= h - 1)).astype(dtype)

    def backward(g):
        gmap = gcoords = None
        if fmap.requires_grad:
            gflat = np.zeros((h * w, c), dtype=dtype)
            np.add.at(gflat, i00, (1 - a) * (1 - b) * g)
            np.add.at(gflat, i01, a * (1 - b) * g)
            np.add.at(gflat, i10, (1 - a) * b * g)
            np.add.at(gflat, i11, a * b * g)
            gmap = gflat.T.reshape(c, h, w)
        if coords.requires_grad:
            du = ((1 - b) * (f01 - f00) + b * (f11 - f10)) * g
            dv = ((1 - a) * (f10 - f00) + a * (f11 - f01)) * g
            gcoords = np.stack([du.sum(1) * inside_u, dv.sum(1) * inside_v], axis=1).astype(coords.dtype)
        return gmap, gcoords

    return Tensor._make(out, (fmap, coords), backward, "bilinear_sample")


TensorLike = Union[Tensor, np.ndarray, float]
