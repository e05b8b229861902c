import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chargraft import autograd as ag


@pytest.fixture(autouse=True)
def _clean_tape():
    ag.reset_tape()
    ag.set_default_dtype(np.float64)
    yield
    ag.reset_tape()


def fd_scalar(f, tensors, eps=1e-6):
    """Central-difference gradients of a scalar-valued f over raw arrays."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with ag.no_grad():
                hi = float(f().data)
            flat[i] = orig - eps
            with ag.no_grad():
                lo = float(f().data)
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def check_grads(f, tensors, tol=1e-6):
    for t in tensors:
        t.zero_grad()
    ag.reset_tape()
    loss = f()
    ag.backward(loss)
    numeric = fd_scalar(f, tensors)
    for t, num in zip(tensors, numeric):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-6)
        rel = np.abs(analytic - num) / denom
        assert rel.max() < tol, f"rel err {rel.max():.3e}"


# --- frozen value oracles ---------------------------------------------------


def test_matmul_value():
    a = ag.tensor([[1.0, 2.0]])
    b = ag.tensor([[3.0], [4.0]])
    out = ag.matmul(a, b)
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_softmax_uniform_on_zeros():
    out = ag.softmax(ag.tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), rtol=0, atol=1e-15)


def test_cross_entropy_uniform_is_log_vocab():
    v = 8
    probs = ag.tensor(np.full((1, v), 1.0 / v))
    loss = ag.cross_entropy(probs, np.array([3]))
    assert math.isclose(loss.item(), math.log(v), rel_tol=1e-12)


def test_sum_grad_is_ones():
    x = ag.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ag.backward(ag.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_squared_norm_grad_is_two_x():
    x = ag.tensor([1.0, 2.0], requires_grad=True)
    ag.backward(ag.sum_(ag.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-15)


def test_detach_blocks_gradient():
    x = ag.tensor([1.0, 2.0], requires_grad=True)
    y = ag.mul(x, x)
    z = ag.sum_(ag.mul(y.detach(), x))
    ag.backward(z)
    # d/dx of const*x is const = x^2 values, no term from the detached branch
    np.testing.assert_allclose(x.grad, [1.0, 4.0], atol=1e-15)


def test_no_grad_records_nothing():
    x = ag.tensor([1.0], requires_grad=True)
    with ag.no_grad():
        y = ag.mul(x, x)
    assert ag.tape_length() == 0
    assert not y.requires_grad


def test_grad_accumulates_across_reuse():
    x = ag.tensor([3.0], requires_grad=True)
    ag.backward(ag.sum_(ag.add(x, x)))
    np.testing.assert_allclose(x.grad, [2.0])


def test_finite_difference_check_quadratic():
    w = ag.tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)

    def f():
        return ag.sum_(ag.mul(w, w))

    report = ag.finite_difference_check(f, [("w", w)], tolerance=1e-6)
    assert report.passed
    assert report.max_rel_error < 1e-6


def test_finite_difference_check_flags_wrong_gradient():
    w = ag.tensor(np.array([0.5, -1.5]), requires_grad=True)

    class Bad:
        # pretend d/dw sum(w^2) = w (off by 2x)
        def __call__(self):
            y = ag.sum_(ag.mul(w.detach(), w))
            return y

    report = ag.finite_difference_check(Bad(), [("w", w)], tolerance=1e-4)
    assert not report.passed


def test_matmul_shape_error_names_shapes():
    a = ag.tensor(np.zeros((2, 3)))
    b = ag.tensor(np.zeros((4, 2)))
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\)"):
        ag.matmul(a, b)


def test_add_shape_mismatch_rejected():
    with pytest.raises(ag.ShapeError):
        ag.add(ag.tensor(np.zeros(3)), ag.tensor(np.zeros(4)))


def test_cross_entropy_reductions_agree():
    rng = np.random.Generator(np.random.PCG64(7))
    logits = rng.standard_normal((5, 11))
    probs = ag.softmax(ag.tensor(logits), axis=-1)
    targets = rng.integers(0, 11, size=5)
    per = ag.cross_entropy(probs, targets, reduction="none").data
    s = ag.cross_entropy(ag.softmax(ag.tensor(logits), axis=-1), targets, reduction="sum").item()
    m = ag.cross_entropy(ag.softmax(ag.tensor(logits), axis=-1), targets, reduction="mean").item()
    assert math.isclose(per.sum(), s, rel_tol=1e-12)
    assert math.isclose(per.mean(), m, rel_tol=1e-12)


def test_cross_entropy_floors_zero_probability():
    probs = ag.tensor(np.array([[1.0, 0.0]]))
    loss = ag.cross_entropy(probs, np.array([1]))
    assert np.isfinite(loss.item())
    assert loss.item() > 60.0  # -log(1e-30)


def test_max_pool_tie_goes_to_first():
    x = ag.tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
    ag.backward(ag.sum_(ag.max_pool_over_axis(x, axis=1)))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_embedding_lookup_out_of_range():
    table = ag.tensor(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        ag.embedding_lookup(table, np.array([4]))


def test_euclidean_distance_values():
    x = ag.tensor([0.0, 3.0])
    y = ag.tensor([4.0, 0.0])
    assert math.isclose(ag.euclidean_distance(x, y).item(), 5.0, rel_tol=1e-15)
    a = ag.tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))
    b = ag.tensor(np.array([[3.0, 4.0], [1.0, 1.0]]))
    np.testing.assert_allclose(ag.euclidean_distance(a, b).data, [5.0, 0.0])


def test_dtype_switch():
    ag.set_default_dtype(np.float32)
    t = ag.tensor([1, 2, 3])
    assert t.dtype == np.float32
    ag.set_default_dtype(np.float64)
    t = ag.tensor([1, 2, 3])
    assert t.dtype == np.float64


# --- gradient properties ----------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_grads(n, k, m, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    a = ag.tensor(rng.standard_normal((n, k)), requires_grad=True)
    b = ag.tensor(rng.standard_normal((k, m)), requires_grad=True)
    check_grads(lambda: ag.sum_(ag.mul(ag.matmul(a, b), ag.matmul(a, b))), [a, b], tol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 2**31))
def test_softmax_cross_entropy_grads(n, v, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = ag.tensor(rng.standard_normal((n, v)), requires_grad=True)
    targets = rng.integers(0, v, size=n)
    check_grads(
        lambda: ag.cross_entropy(ag.softmax(x, axis=-1), targets), [x], tol=1e-5
    )


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 2**31))
def test_layer_norm_grads(n, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = ag.tensor(rng.standard_normal((n, d)), requires_grad=True)
    gain = ag.tensor(rng.standard_normal(d), requires_grad=True)
    bias = ag.tensor(rng.standard_normal(d), requires_grad=True)
    # near-constant rows make 1/std large; central differences lose a digit
    check_grads(
        lambda: ag.sum_(ag.mul(ag.layer_norm(x, gain, bias), ag.layer_norm(x, gain, bias))),
        [x, gain, bias],
        tol=1e-3,
    )


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_unary_grads(n, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    base = rng.standard_normal((n, d)) * 0.8 + 0.1
    for op in (ag.tanh, ag.sigmoid, ag.exp, ag.neg):
        x = ag.tensor(base.copy(), requires_grad=True)
        check_grads(lambda op=op, x=x: ag.sum_(op(x)), [x], tol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_relu_grads_away_from_kink(n, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x_data = rng.standard_normal((n, d))
    x_data[np.abs(x_data) < 1e-2] = 0.5  # keep FD probes off the nondifferentiable point
    x = ag.tensor(x_data, requires_grad=True)
    check_grads(lambda: ag.sum_(ag.relu(x)), [x], tol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_log_grads(n, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = ag.tensor(rng.uniform(0.5, 2.0, (n, d)), requires_grad=True)
    check_grads(lambda: ag.sum_(ag.log(x)), [x], tol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_max_pool_grads(n, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    # well-separated values so FD never crosses an argmax switch
    vals = rng.permutation(n * d).astype(float).reshape(n, d)
    x = ag.tensor(vals, requires_grad=True)
    check_grads(lambda: ag.sum_(ag.max_pool_over_axis(x, axis=0)), [x], tol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_concat_grads(a_rows, b_rows, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    a = ag.tensor(rng.standard_normal((a_rows, d)), requires_grad=True)
    b = ag.tensor(rng.standard_normal((b_rows, d)), requires_grad=True)
    check_grads(
        lambda: ag.sum_(ag.mul(ag.concat([a, b], axis=0), ag.concat([a, b], axis=0))),
        [a, b],
        tol=1e-5,
    )


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_embedding_lookup_grads(rows, d, n_ids, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    table = ag.tensor(rng.standard_normal((rows, d)), requires_grad=True)
    ids = rng.integers(0, rows, size=n_ids)
    check_grads(lambda: ag.sum_(ag.mul(ag.embedding_lookup(table, ids),
                                       ag.embedding_lookup(table, ids))),
                [table], tol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_euclidean_distance_grads(n, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = ag.tensor(rng.standard_normal((n, d)) + 2.0, requires_grad=True)
    y = ag.tensor(rng.standard_normal((n, d)) - 2.0, requires_grad=True)
    check_grads(lambda: ag.sum_(ag.euclidean_distance(x, y)), [x, y], tol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_add_bias_grads(n, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = ag.tensor(rng.standard_normal((n, d)), requires_grad=True)
    b = ag.tensor(rng.standard_normal(d), requires_grad=True)
    check_grads(lambda: ag.sum_(ag.mul(ag.add_bias(x, b), ag.add_bias(x, b))),
                [x, b], tol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_slice_and_reshape_grads(n, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = ag.tensor(rng.standard_normal((n, d)), requires_grad=True)
    check_grads(lambda: ag.sum_(ag.mul(x[0], x[0])), [x], tol=1e-5)
    x.zero_grad()
    check_grads(lambda: ag.sum_(ag.mul(ag.reshape(x, (d, n)), ag.reshape(x, (d, n)))),
                [x], tol=1e-5)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 4), st.integers(2, 4), st.integers(0, 2**31))
def test_transpose_and_mean_grads(n, d, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = ag.tensor(rng.standard_normal((n, d)), requires_grad=True)
    check_grads(lambda: ag.mean_(ag.mul(ag.transpose(x), ag.transpose(x))), [x], tol=1e-5)
