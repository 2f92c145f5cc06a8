import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdgat import autodiff as ad
from tdgat.autodiff import Tape, Tensor, backward, grad_check


def param(values):
    return Tensor(values, requires_grad=True)


def grads_of(fn, *params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    return [p.grad.copy() for p in params]


def central_diff(fn, p, h=1e-6):
    g = np.zeros_like(p.values)
    for idx in np.ndindex(*p.shape):
        orig = p.values[idx]
        p.values[idx] = orig + h
        up = fn().item()
        p.values[idx] = orig - h
        down = fn().item()
        p.values[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def test_matmul_values():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), m).values, m.values)
    out = ad.matmul(m, Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.values, [[19, 22], [43, 50]])


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    w = Tensor(rng.normal(size=(3, 2)))
    f = lambda: ad.sum_all(ad.mul(ad.matmul(a, b), w))
    ga, gb = grads_of(f, a, b)
    for p, g in ((a, ga), (b, gb)):
        # f is linear in each entry, so a large step adds no truncation error
        num = central_diff(f, p, h=1e-2)
        assert np.max(ad.relative_error(g, num)) < 1e-7


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_analytic_scalars():
    x = param([[0.0]])
    assert ad.sigmoid(x).item() == 0.5
    assert grads_of(lambda: ad.sigmoid(x), x)[0][0, 0] == 0.25
    assert ad.tanh(x).item() == 0.0
    assert grads_of(lambda: ad.tanh(x), x)[0][0, 0] == 1.0
    y = param([[-1.0]])
    assert ad.leaky_relu(y, 0.2).item() == pytest.approx(-0.2, abs=1e-15)
    assert grads_of(lambda: ad.leaky_relu(y, 0.2), y)[0][0, 0] == pytest.approx(0.2, abs=1e-15)
    # exactly zero takes the positive branch
    assert grads_of(lambda: ad.leaky_relu(x, 0.2), x)[0][0, 0] == 1.0


def test_sigmoid_extremes_finite():
    s = ad.sigmoid(Tensor([[-800.0, 800.0]])).values
    assert s[0, 0] == 0.0 and s[0, 1] == 1.0


def test_concat_cols_layout():
    a = Tensor(np.arange(4.0).reshape(2, 2))
    b = Tensor(np.arange(6.0).reshape(2, 3) + 10)
    np.testing.assert_array_equal(ad.concat_cols([a]).values, a.values)
    out = ad.concat_cols([a, b]).values
    assert out.shape == (2, 5)
    np.testing.assert_array_equal(out[:, :2], a.values)
    np.testing.assert_array_equal(out[:, 2:], b.values)
    with pytest.raises(ad.ShapeError):
        ad.concat_cols([])
    with pytest.raises(ad.ShapeError):
        ad.concat_cols([a, Tensor(np.ones((3, 1)))])


def test_concat_three_parts_gradient():
    rng = np.random.default_rng(1)
    parts = [param(rng.normal(size=(3, c))) for c in (1, 2, 4)]
    w = Tensor(rng.normal(size=(3, 7)))
    f = lambda: ad.sum_all(ad.mul(ad.tanh(ad.concat_cols(parts)), w))
    grads = grads_of(f, *parts)
    for p, g in zip(parts, grads):
        assert np.max(ad.relative_error(g, central_diff(f, p))) < 1e-7


def test_softmax_examples():
    p = ad.softmax_rows(Tensor([[1.0, 1.0, 1.0]])).values
    np.testing.assert_allclose(p, [[1 / 3] * 3], atol=1e-15)
    p = ad.softmax_rows(Tensor([[0.0, math.log(2.0)]])).values
    np.testing.assert_allclose(p, [[1 / 3, 2 / 3]], atol=1e-15)
    x = np.random.default_rng(2).normal(size=(4, 5))
    np.testing.assert_allclose(ad.softmax_rows(Tensor(x)).values,
                               ad.softmax_rows(Tensor(x + 123.4)).values, atol=1e-12, rtol=0)


def test_softmax_mask():
    mask = np.array([[True, False, True], [False, True, False]])
    p = ad.softmax_rows(Tensor([[0.0, 50.0, 0.0], [3.0, 1.0, -2.0]]), mask).values
    np.testing.assert_allclose(p, [[0.5, 0.0, 0.5], [0.0, 1.0, 0.0]], atol=1e-15)
    with pytest.raises(ValueError, match="fully masked"):
        ad.softmax_rows(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


def test_reductions():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    onehot = Tensor([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(ad.weighted_row_sum(onehot, x).values, [[2.0, 3.0]])
    same = Tensor(np.tile([[1.5, -2.0]], (4, 1)))
    np.testing.assert_array_equal(ad.mean_rows(same).values, [[1.5, -2.0]])
    p = param(np.random.default_rng(3).normal(size=(3, 4)))
    assert np.array_equal(grads_of(lambda: ad.sum_all(p), p)[0], np.ones((3, 4)))
    assert ad.reduce("weighted_row_sum", x, onehot).values.tolist() == [[2.0, 3.0]]
    with pytest.raises(ValueError):
        ad.reduce("median", x)


def test_backward_basic_and_accumulation():
    x = param(np.zeros((2, 3)))
    with Tape() as tape:
        loss = ad.sum_all(ad.sigmoid(x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 0.25))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 0.5))


def test_backward_errors():
    x = param(np.ones((2, 2)))
    with Tape() as tape:
        y = ad.sigmoid(x)
    with pytest.raises(ad.ShapeError):
        backward(tape, y)
    other = ad.sum_all(x)  # computed off-tape
    with pytest.raises(ValueError, match="not produced"):
        backward(tape, other)


def test_no_recording_without_tape():
    x = param(np.ones((2, 2)))
    with Tape() as tape:
        pass
    ad.sum_all(x)
    assert len(tape) == 0


def test_shared_subexpression_gradient():
    # q = (x + y) * (x + 1) elementwise
    x, y = param([[2.0]]), param([[-4.0]])
    one = Tensor([[1.0]])
    gx, gy = grads_of(lambda: ad.sum_all(ad.mul(ad.add(x, y), ad.add(x, one))), x, y)
    assert gx[0, 0] == 1.0 and gy[0, 0] == 3.0


def test_backward_is_bit_deterministic():
    rng = np.random.default_rng(4)
    a = param(rng.normal(size=(5, 4)))
    b = param(rng.normal(size=(4, 5)))
    mask = rng.random((5, 5)) < 0.6
    mask[np.arange(5), np.arange(5)] = True
    f = lambda: ad.sum_all(ad.mul(ad.softmax_rows(ad.matmul(a, b), mask), ad.tanh(ad.matmul(a, b))))
    first = grads_of(f, a, b)
    second = grads_of(f, a, b)
    for g1, g2 in zip(first, second):
        assert g1.tobytes() == g2.tobytes()


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(5)
    a = param(rng.normal(size=(3, 3)))
    w = Tensor(rng.normal(size=(3, 3)))
    report = grad_check(lambda: ad.sum_all(ad.mul(a, w)), [a])
    assert report.passed
    assert report.max_rel_error < 1e-9


def test_grad_check_detects_corrupted_adjoint():
    def bad_tanh(t):
        v = np.tanh(t.values)
        return ad.record_op(v, (t,), lambda g: (g * (1.0 - v),))  # should be 1 - v**2

    rng = np.random.default_rng(6)
    a = param(rng.normal(size=(3, 2)))
    report = grad_check(lambda: ad.sum_all(bad_tanh(a)), [a])
    assert not report.passed
    assert report.max_rel_error > 1e-2


# -- randomized per-op gradient checks -------------------------------------

shapes = st.tuples(st.integers(1, 4), st.integers(1, 4))
seeds = st.integers(0, 2**32 - 1)


def _check(f, params, tol=1e-4):
    report = grad_check(f, params, h=1e-5, tol=tol)
    assert report.passed, report.summary()


def _weights(rng, shape):
    # random projection so every output entry matters
    return Tensor(rng.normal(size=shape))


UNARY = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "leaky_relu": lambda t: ad.leaky_relu(t, 0.2),
    "exp": ad.exp,
    "scale": lambda t: ad.scale(t, -1.7),
    "transpose": ad.transpose,
    "mean_rows": ad.mean_rows,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=50, deadline=None)
@given(shape=shapes, seed=seeds)
def test_unary_ops_gradcheck(name, shape, seed):
    rng = np.random.default_rng(seed)
    x = param(rng.normal(size=shape))
    if name == "leaky_relu":
        # keep away from the kink where central differences straddle both branches
        x.values[np.abs(x.values) < 1e-3] += 0.01
    out_shape = UNARY[name](x).shape
    w = _weights(rng, out_shape)
    _check(lambda: ad.sum_all(ad.mul(UNARY[name](x), w)), [x])


BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=50, deadline=None)
@given(shape=shapes, seed=seeds)
def test_binary_ops_gradcheck(name, shape, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng.normal(size=shape)), param(rng.normal(size=shape))
    w = _weights(rng, shape)
    _check(lambda: ad.sum_all(ad.mul(BINARY[name](a, b), w)), [a, b])


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 4), k=st.integers(1, 4), n=st.integers(1, 4), seed=seeds)
def test_matmul_and_weighted_sum_gradcheck(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng.normal(size=(m, k))), param(rng.normal(size=(k, n)))
    w = _weights(rng, (m, n))
    _check(lambda: ad.sum_all(ad.mul(ad.matmul(a, b), w)), [a, b])
    _check(lambda: ad.sum_all(ad.mul(ad.weighted_row_sum(a, b), w)), [a, b])


@settings(max_examples=50, deadline=None)
@given(shape=shapes, seed=seeds)
def test_row_bias_gradcheck(shape, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng.normal(size=shape)), param(rng.normal(size=(1, shape[1])))
    w = _weights(rng, shape)
    _check(lambda: ad.sum_all(ad.mul(ad.add_row_bias(a, b), w)), [a, b])


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 5), n=st.integers(1, 5), seed=seeds)
def test_outer_add_gradcheck(m, n, seed):
    rng = np.random.default_rng(seed)
    u, v = param(rng.normal(size=(m, 1))), param(rng.normal(size=(n, 1)))
    w = _weights(rng, (m, n))
    _check(lambda: ad.sum_all(ad.mul(ad.outer_add(u, v), w)), [u, v])


@settings(max_examples=50, deadline=None)
@given(shape=shapes, seed=seeds)
def test_masked_softmax_gradcheck_and_normalization(shape, seed):
    rng = np.random.default_rng(seed)
    x = param(rng.normal(size=shape) * 3)
    mask = rng.random(shape) < 0.6
    mask[np.arange(shape[0]), rng.integers(0, shape[1], shape[0])] = True
    p = ad.softmax_rows(x, mask).values
    assert np.all((p >= 0) & (p <= 1))
    assert np.all(p[~mask] == 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    w = _weights(rng, shape)
    _check(lambda: ad.sum_all(ad.mul(ad.softmax_rows(x, mask), w)), [x])


@settings(max_examples=50, deadline=None)
@given(rows=st.integers(1, 4), widths=st.lists(st.integers(1, 3), min_size=1, max_size=4), seed=seeds)
def test_concat_gradcheck(rows, widths, seed):
    rng = np.random.default_rng(seed)
    parts = [param(rng.normal(size=(rows, c))) for c in widths]
    w = _weights(rng, (rows, sum(widths)))
    _check(lambda: ad.sum_all(ad.mul(ad.concat_cols(parts), w)), parts)


@settings(max_examples=50, deadline=None)
@given(shape=shapes, seed=seeds)
def test_row_selection_gradcheck(shape, seed):
    rng = np.random.default_rng(seed)
    x = param(rng.normal(size=shape))
    idx = rng.integers(0, shape[0], size=3).tolist()  # repeats allowed
    w = _weights(rng, (3, shape[1]))
    _check(lambda: ad.sum_all(ad.mul(ad.take_rows(x, idx), w)), [x])
    start = int(rng.integers(0, shape[0]))
    w2 = _weights(rng, (shape[0] - start, shape[1]))
    _check(lambda: ad.sum_all(ad.mul(ad.slice_rows(x, start, shape[0]), w2)), [x])


@settings(max_examples=50, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(2, 4), seed=seeds)
def test_cross_entropy_gradcheck(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = param(rng.normal(size=(rows, cols)))
    labels = rng.integers(0, cols, rows).tolist()
    _check(lambda: ad.cross_entropy(ad.softmax_rows(x), labels), [x])
    _check(lambda: ad.sum_squares([x]), [x])


def test_cross_entropy_clamp():
    probs = Tensor([[1.0, 0.0]])
    assert ad.cross_entropy(probs, [1]).item() == pytest.approx(-math.log(1e-12))
    assert ad.cross_entropy(probs, [0]).item() == 0.0
