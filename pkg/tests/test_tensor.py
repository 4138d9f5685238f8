import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpv.tensor import (
    NEG_INF,
    ContractError,
    Rng,
    ShapeError,
    Tensor,
    concat,
    cross_entropy,
    exp,
    finite_diff_check,
    gelu,
    layer_norm,
    log,
    matmul,
    relu,
    softmax_lastdim,
    transpose,
)


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# -- matmul -------------------------------------------------------------------------
def test_matmul_identity():
    x = np.arange(6.0).reshape(2, 3)
    out = matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_arithmetic():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_against_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert finite_diff_check(lambda _: matmul(a, b).sum(), a) < 1e-6
    assert finite_diff_check(lambda _: matmul(a, b).sum(), b) < 1e-6


def _triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            c[i, j] = s
    return c


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_matmul_bit_exact_against_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    assert np.array_equal(matmul(Tensor(a), Tensor(b)).data, _triple_loop(a, b))


def test_batched_matmul_broadcasts_shared_weight():
    rng = np.random.default_rng(0)
    a, w = rand(rng, 2, 3, 4), rand(rng, 4, 5)
    out = matmul(a, w)
    np.testing.assert_allclose(out.data, np.einsum("bik,kj->bij", a.data, w.data))
    assert finite_diff_check(lambda _: (matmul(a, w) * matmul(a, w)).sum(), w) < 1e-6


# -- softmax ------------------------------------------------------------------------
def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_masked_softmax_zeroes_masked_entry_exactly():
    y = softmax_lastdim(Tensor([1.0, 2.0, 3.0]), np.array([0.0, NEG_INF, 0.0])).data
    assert y[1] == 0.0
    e1, e3 = np.exp(1.0), np.exp(3.0)
    np.testing.assert_allclose(y[[0, 2]], [e1 / (e1 + e3), e3 / (e1 + e3)], rtol=1e-12)


def test_softmax_fully_masked_row_is_rejected():
    with pytest.raises(ContractError):
        softmax_lastdim(Tensor(np.zeros((2, 3))), np.array([[0, 0, 0], [NEG_INF] * 3]))


def test_softmax_gradient():
    rng = np.random.default_rng(5)
    x = rand(rng, 2, 5)
    w = Tensor(rng.standard_normal((2, 5)))
    assert finite_diff_check(lambda _: (softmax_lastdim(x) * w).sum(), x) < 1e-6


def test_softmax_then_sum_gradient_is_zero():
    # Relative error is meaningless at a zero gradient; compare absolutely.
    x = Tensor(np.random.default_rng(6).standard_normal((3, 4)), requires_grad=True)
    softmax_lastdim(x).sum().backward()
    assert np.abs(x.grad).max() < 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    y = softmax_lastdim(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_masked_softmax_property(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, n)) * 5
    mask = np.where(rng.random((3, n)) < 0.4, NEG_INF, 0.0)
    mask[:, rng.integers(n)] = 0.0  # keep at least one entry per row
    y = softmax_lastdim(Tensor(x), mask).data
    assert (y[mask == NEG_INF] == 0.0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


# -- backward ------------------------------------------------------------------------
def test_backward_of_sum_is_ones():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * x).backward()


def test_shared_subexpression_gradients_add():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [2 * 3.0 + 3 * 9.0])


# -- finite_diff_check ----------------------------------------------------------------
def test_finite_diff_identity_sum_is_exact_up_to_rounding():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3)))
    assert finite_diff_check(lambda t: t.sum(), x) < 1e-8


def test_finite_diff_restores_inputs():
    x = Tensor(np.arange(4.0))
    before = x.data.copy()
    finite_diff_check(lambda t: (t * t).sum(), x)
    np.testing.assert_array_equal(x.data, before)
    assert not x.requires_grad


_UNARY = {
    "exp": lambda t: exp(t),
    "log": lambda t: log(t * t + 1.0),
    "gelu": gelu,
    "transpose": lambda t: transpose(t, (1, 0)) * Tensor(np.arange(6.0).reshape(3, 2)),
    "reshape": lambda t: t.reshape(3, 2) * Tensor(np.arange(6.0).reshape(3, 2)),
    "getitem": lambda t: t[:, 1:] * 2.0,
    "concat": lambda t: concat([t, t * t], axis=-1),
    "mean": lambda t: t.mean(axis=0) * Tensor([1.0, 2.0, 3.0]),
    "div": lambda t: t / (t * t + 2.0),
    "sub": lambda t: 1.0 - t * 3.0,
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_op_gradients_over_many_seeds(name):
    f = _UNARY[name]
    w = Tensor(np.random.default_rng(99).standard_normal((2, 3)))
    for seed in range(100):
        x = Tensor(np.random.default_rng(seed).standard_normal((2, 3)))

        def loss(t):
            y = f(t)
            return (y * y).sum() if y.shape != w.shape else (y * w).sum()

        assert finite_diff_check(loss, x) < 1e-4, seed


def test_relu_gradient_away_from_kink():
    x = Tensor([-1.0, 0.5, 2.0])
    assert finite_diff_check(lambda t: (relu(t) * relu(t)).sum(), x) < 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_binary_and_fused_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 4, 5)
    g, s = rand(rng, 5), rand(rng, 5)
    labels = rng.integers(0, 5, 3)
    assert finite_diff_check(lambda _: cross_entropy(matmul(a, b), labels), a) < 1e-4
    assert finite_diff_check(lambda _: cross_entropy(matmul(a, b), labels), b) < 1e-4
    x = matmul(a, b)
    for t in (g, s):
        assert finite_diff_check(
            lambda _: cross_entropy(layer_norm(x, g, s), labels), t) < 1e-4
    assert finite_diff_check(lambda _: cross_entropy(layer_norm(matmul(a, b), g, s), labels),
                             a) < 1e-4
    m = rand(rng, 4, 1)
    assert finite_diff_check(lambda _: ((a * m.reshape(1, 4)) + m.reshape(1, 4)).sum(), m) < 1e-4


def test_cross_entropy_uniform_is_log_c():
    out = cross_entropy(Tensor(np.zeros((2, 38))), np.array([0, 37]))
    np.testing.assert_allclose(out.data, np.log(38.0), rtol=1e-12)
    np.testing.assert_allclose(np.log(38.0), 3.63759, atol=1e-5)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


def test_layer_norm_constant_row_gives_shift():
    g = Tensor([2.0, 3.0, 4.0])
    b = Tensor([0.5, -1.0, 0.0])
    out = layer_norm(Tensor(np.full((2, 3), 7.0)), g, b)
    np.testing.assert_array_equal(out.data, np.tile(b.data, (2, 1)))


def test_graph_is_acyclic_and_grad_shape_matches():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 3)))
    y = matmul(matmul(x, w), w).sum()
    seen, stack = set(), [(y, ())]
    while stack:
        node, path = stack.pop()
        assert id(node) not in path
        for p in node._parents:
            stack.append((p, path + (id(node),)))
    y.backward()
    assert w.grad.shape == w.shape
    assert w.data.size == int(np.prod(w.shape))


def test_rng_same_seed_same_stream():
    a, b = Rng(42), Rng(42)
    np.testing.assert_array_equal(a.normal((5,)), b.normal((5,)))
    np.testing.assert_array_equal(a.permutation(10), b.permutation(10))
    np.testing.assert_array_equal(Rng(7).spawn(3).normal((4,)), Rng(7).spawn(3).normal((4,)))
    assert not np.array_equal(Rng(1).normal((4,)), Rng(2).normal((4,)))
