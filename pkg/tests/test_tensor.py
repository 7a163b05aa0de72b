import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcdnet import tensor as T
from pcdnet.errors import ContractError, DomainError, ShapeError
from pcdnet.gradcheck import check_gradients
from pcdnet.tensor import EPS_STD, Tensor, no_grad

from conftest import leaf


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def matmul_loops(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv_loops(x, k, stride, pad):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            out[o, i, j] += k[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
    return out


def bilinear_scalar(fmap, u, v):
    c, h, w = fmap.shape
    u = min(max(u, 0.0), w - 1.0)
    v = min(max(v, 0.0), h - 1.0)
    u0, v0 = min(int(np.floor(u)), w - 2), min(int(np.floor(v)), h - 2)
    a, b = u - u0, v - v0
    return ((1 - a) * (1 - b) * fmap[:, v0, u0] + a * (1 - b) * fmap[:, v0, u0 + 1]
            + (1 - a) * b * fmap[:, v0 + 1, u0] + a * b * fmap[:, v0 + 1, u0 + 1])


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity_and_hand_case():
    a = Tensor(np.arange(9.0).reshape(3, 3))
    assert np.array_equal((Tensor(np.eye(3)) @ a).data, a.data)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.allclose((Tensor(a) @ Tensor(b)).data, matmul_loops(a, b), atol=1e-6)


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def test_add_zero_and_relu():
    x = Tensor([1.5, -2.0, 3.0])
    assert np.array_equal((x + 0).data, x.data)
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_broadcast_add_matches_loops(rng):
    a, b = rng.normal(size=(4, 1, 3)), rng.normal(size=(1, 5, 3))
    out = T.add(Tensor(a), Tensor(b)).data
    ref = np.empty((4, 5, 3))
    for i in range(4):
        for j in range(5):
            for k in range(3):
                ref[i, j, k] = a[i, 0, k] + b[0, j, k]
    assert out.shape == (4, 5, 3)
    assert np.array_equal(out, ref)


def test_non_broadcastable_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))


def test_elementwise_dispatch():
    a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    assert np.array_equal(T.elementwise("mul", a, b).data, [3.0, -8.0])
    assert np.array_equal(T.elementwise("scale", a, 2.0).data, [2.0, -4.0])
    assert np.array_equal(T.elementwise("relu", a).data, [1.0, 0.0])
    with pytest.raises(ValueError):
        T.elementwise("pow", a, b)


def test_relu_gradient_is_zero_at_zero():
    x = leaf([0.0, 1.0, -1.0])
    T.relu(x).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def test_reduce_stats_constant_and_hand_case():
    mu, sd = T.reduce_stats(Tensor(np.full((6,), 3.0)), 0)
    assert mu.item() == 3.0
    assert np.isclose(sd.item(), np.sqrt(EPS_STD), rtol=1e-12)
    mu, sd = T.reduce_stats(Tensor([1.0, 2.0, 3.0, 4.0]), 0)
    assert mu.item() == 2.5
    assert np.isclose(sd.item(), np.sqrt(1.25 + EPS_STD), rtol=1e-12)


@pytest.mark.parametrize("canonical", [False, True])
def test_reduce_stats_two_pass_oracle(rng, canonical):
    x = rng.normal(size=(8, 16))
    mu, sd = T.reduce_stats(Tensor(x), 0, canonical=canonical)
    m_ref = np.array([sum(x[i, j] for i in range(8)) / 8 for j in range(16)])
    v_ref = np.array([sum((x[i, j] - m_ref[j]) ** 2 for i in range(8)) / 8 for j in range(16)])
    assert np.allclose(mu.data, m_ref, atol=1e-6)
    assert np.allclose(sd.data, np.sqrt(v_ref + EPS_STD), atol=1e-6)


def test_canonical_stats_are_exactly_permutation_invariant(rng):
    x = rng.normal(size=(57, 6)).astype(np.float32)
    perm = rng.permutation(57)
    a = T.reduce_stats(Tensor(x), 0, canonical=True)
    b = T.reduce_stats(Tensor(x[perm]), 0, canonical=True)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_empty_reduction_raises():
    with pytest.raises(DomainError):
        T.mean(Tensor(np.zeros((0, 3))), 0)
    with pytest.raises(DomainError):
        T.reduce_stats(Tensor(np.zeros((0, 3))), 0)


def test_sorted_sum_matches_sum(rng):
    x = rng.normal(size=(5, 7))
    assert np.allclose(T.sorted_sum(Tensor(x), 0).data, x.sum(0), atol=1e-12)


# ---------------------------------------------------------------------------
# concat / reshape / indexing
# ---------------------------------------------------------------------------

def test_concat_cases(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    assert np.array_equal(T.concat([x], 1).data, x.data)
    y = Tensor(rng.normal(size=(2, 5)))
    out = T.concat([x, y], 1)
    assert out.shape == (2, 8)
    assert np.array_equal(out.data[:, :3], x.data) and np.array_equal(out.data[:, 3:], y.data)


def test_concat_names_offending_part():
    parts = [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1)))]
    with pytest.raises(ShapeError, match="part 2"):
        T.concat(parts, 1)


def test_getitem_gather_accumulates_gradient():
    x = leaf([1.0, 2.0, 3.0])
    x[np.array([0, 0, 2])].sum().backward()
    assert np.array_equal(x.grad, [2.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_one_by_one_sums_channels(rng):
    x = rng.normal(size=(3, 5, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 3, 1, 1))))
    assert np.allclose(out.data[0], x.sum(0), atol=1e-12)


def test_conv_average_on_constant_interior():
    x = Tensor(np.full((1, 6, 6), 2.5))
    out = T.conv2d(x, Tensor(np.full((1, 1, 3, 3), 1 / 9)), pad=1)
    assert np.allclose(out.data[0, 1:-1, 1:-1], 2.5, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_six_loop_oracle(rng, stride, pad):
    x, k = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad)
    assert np.allclose(out.data, conv_loops(x, k, stride, pad), atol=1e-5)


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), pad=1)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def test_bilinear_integer_and_midpoint(rng):
    fmap = rng.normal(size=(2, 4, 5))
    coords = np.array([[0.0, 0.0], [3.0, 2.0], [4.0, 3.0], [1.5, 1.0]])
    out = T.bilinear_sample(Tensor(fmap), Tensor(coords)).data
    assert np.array_equal(out[0], fmap[:, 0, 0])
    assert np.array_equal(out[1], fmap[:, 2, 3])
    assert np.array_equal(out[2], fmap[:, 3, 4])
    assert np.allclose(out[3], (fmap[:, 1, 1] + fmap[:, 1, 2]) / 2, atol=1e-15)


def test_bilinear_matches_scalar_oracle_with_clamping(rng):
    fmap = rng.normal(size=(3, 6, 7))
    coords = rng.uniform(-2, 9, size=(40, 2))
    out = T.bilinear_sample(Tensor(fmap), Tensor(coords)).data
    ref = np.stack([bilinear_scalar(fmap, u, v) for u, v in coords])
    assert np.allclose(out, ref, atol=1e-6)


def test_bilinear_clamped_coordinates_get_zero_gradient():
    fmap = Tensor(np.arange(12.0).reshape(1, 3, 4))
    coords = leaf([[-1.0, 1.5], [10.0, 0.5]])
    T.bilinear_sample(fmap, coords).sum().backward()
    assert coords.grad[0, 0] == 0 and coords.grad[1, 0] == 0
    assert coords.grad[0, 1] != 0


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_trivial_cases(rng):
    x = leaf(rng.normal(size=(3, 4)))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))
    x.zero_grad()
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data, atol=0)


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_shared_node_visited_once():
    x = leaf([2.0])
    y = x * x
    z = (y + y).sum()  # y feeds z twice
    order = T.topological_order(z)
    assert len(order) == len({id(n) for n in order})
    z.backward()
    assert np.allclose(x.grad, [8.0])


def test_gradient_linearity(rng):
    x = leaf(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(3, 2)))

    def f():
        return T.relu(x @ w).sum()

    def g():
        return (x * x).mean()

    grads = []
    for fn in (f, g, lambda: T.scale(f(), 1.7) + T.scale(g(), -0.3)):
        x.zero_grad()
        fn().backward()
        grads.append(x.grad.copy())
    assert np.allclose(grads[2], 1.7 * grads[0] - 0.3 * grads[1], atol=1e-10)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = x * 3
    assert not y.requires_grad and y._parents == ()


def test_forward_is_deterministic(rng):
    x, k = rng.normal(size=(2, 8, 8)), rng.normal(size=(4, 2, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(k), 2, 1).data
    b = T.conv2d(Tensor(x), Tensor(k), 2, 1).data
    assert np.array_equal(a, b)


# finite differences on many random f64 inputs per op
OPS = {
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (1, 4)]),
    "div": (lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "stats": (lambda a: T.reduce_stats(a, 1)[1] + T.reduce_stats(a, 1)[0], [(3, 5)]),
    "conv2d": (lambda a, b: T.conv2d(a, b, 2, 1), [(2, 6, 5), (3, 2, 3, 3)]),
    "concat": (lambda a, b: T.concat([a, b], 0), [(2, 3), (4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_op_gradients_random_inputs(name, seed):
    fn, shapes = OPS[name]
    r = np.random.default_rng(seed)
    ins = [leaf(r.normal(size=s)) for s in shapes]
    w = Tensor(r.uniform(0.5, 1.5, size=fn(*ins).shape))
    assert check_gradients(lambda: (fn(*ins) * w).sum(), ins, step=1e-5) < 1e-4
