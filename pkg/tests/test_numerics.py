import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, rel_error
from prunelab import numerics as nx
from prunelab.errors import NotPositiveDefinite, ShapeMismatch


# -- solve_spd -------------------------------------------------------------


def test_identity_system():
    b = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(nx.solve_spd(np.eye(3), b), b)


def test_diagonal_system():
    x = nx.solve_spd(np.diag([2.0, 4.0]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(x, [0.5, 0.25], rtol=0, atol=1e-15)


def test_damped_gram_residual():
    gen = np.random.default_rng(0)
    a = gen.standard_normal((8, 8))
    h = a @ a.T + 0.1 * np.eye(8)
    b = gen.standard_normal(8)
    x = nx.solve_spd(h, b)
    assert np.abs(h @ x - b).max() < 1e-10


def test_inputs_unmodified():
    gen = np.random.default_rng(1)
    a = gen.standard_normal((5, 5))
    h = a @ a.T + np.eye(5)
    b = gen.standard_normal(5)
    h0, b0 = h.copy(), b.copy()
    nx.solve_spd(h, b)
    np.testing.assert_array_equal(h, h0)
    np.testing.assert_array_equal(b, b0)


def test_not_positive_definite():
    with pytest.raises(NotPositiveDefinite):
        nx.solve_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(2))


def test_matrix_rhs():
    h = np.array([[4.0, 1.0], [1.0, 3.0]])
    b = np.eye(2)
    np.testing.assert_allclose(nx.solve_spd(h, b), np.linalg.inv(h), atol=1e-14)


def test_fp32_tolerance():
    gen = np.random.default_rng(2)
    a = gen.standard_normal((16, 40))
    h = (a @ a.T + 0.5 * np.eye(16)).astype(np.float32)
    b = gen.standard_normal(16).astype(np.float32)
    x = nx.solve_spd(h, b)
    resid = np.abs(h.astype(np.float64) @ x - b).max() / np.abs(b).max()
    assert resid < 1e-5


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 512), seed=st.integers(0, 2**31 - 1))
def test_residual_bound_random_damped_grams(d, seed):
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((d, d + 8))
    h = x @ x.T
    h += 1e-2 * np.mean(np.diag(h)) * np.eye(d)
    b = gen.standard_normal(d)
    sol = nx.solve_spd(h, b)
    assert np.abs(h @ sol - b).max() <= 1e-8 * max(1.0, np.abs(b).max())


# -- kernels ---------------------------------------------------------------


def test_softmax_constant_row_is_uniform():
    for k in (1, 3, 7):
        np.testing.assert_allclose(nx.softmax(np.full((2, k), 3.7)), 1.0 / k, rtol=1e-15)


def test_softmax_masks_neg_inf():
    out = nx.softmax(np.array([[0.0, -np.inf, 0.0]]))
    np.testing.assert_array_equal(out, [[0.5, 0.0, 0.5]])


@pytest.mark.parametrize("vocab", [2, 11, 257])
def test_cross_entropy_uniform_is_log_v(vocab):
    loss, _ = nx.cross_entropy(np.zeros((5, vocab)), np.arange(5) % vocab)
    assert loss == pytest.approx(math.log(vocab), abs=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeMismatch):
        nx.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_rms_norm_gain_shape_error():
    with pytest.raises(ShapeMismatch):
        nx.rms_norm(np.ones((2, 3)), np.ones(4))


def test_cross_entropy_target_range():
    with pytest.raises(ShapeMismatch):
        nx.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_embedding_range():
    with pytest.raises(ShapeMismatch):
        nx.embedding(np.zeros((4, 2)), np.array([4]))


def kernel_gradient_errors(seed: int) -> dict[str, float]:
    """Max relative FD error of every kernel backward on random 4x6 inputs (fp64)."""
    gen = np.random.default_rng(seed)
    errs = {}

    a, b = gen.standard_normal((4, 6)), gen.standard_normal((6, 5))
    r = gen.standard_normal((4, 5))
    da, db = nx.matmul_backward(r, a, b)
    errs["matmul.a"] = rel_error(da, central_diff(lambda: float(np.sum(nx.matmul(a, b) * r)), a))
    errs["matmul.b"] = rel_error(db, central_diff(lambda: float(np.sum(nx.matmul(a, b) * r)), b))

    x, r = gen.standard_normal((4, 6)), gen.standard_normal((4, 6))
    dx = nx.softmax_backward(r, nx.softmax(x))
    errs["softmax"] = rel_error(dx, central_diff(lambda: float(np.sum(nx.softmax(x) * r)), x))

    x, gain, r = gen.standard_normal((4, 6)), gen.standard_normal(6), gen.standard_normal((4, 6))
    _, rstd = nx.rms_norm(x, gain)
    dx, dgain = nx.rms_norm_backward(r, x, gain, rstd)
    f = lambda: float(np.sum(nx.rms_norm(x, gain)[0] * r))  # noqa: E731
    errs["rms_norm.x"] = rel_error(dx, central_diff(f, x))
    errs["rms_norm.gain"] = rel_error(dgain, central_diff(f, gain))

    x, r = 2.0 * gen.standard_normal((4, 6)), gen.standard_normal((4, 6))
    errs["silu"] = rel_error(nx.silu_backward(r, x), central_diff(lambda: float(np.sum(nx.silu(x) * r)), x))

    table, ids = gen.standard_normal((4, 6)), gen.integers(0, 4, size=(2, 5))
    r = gen.standard_normal((2, 5, 6))
    dtable = nx.embedding_backward(r, ids, 4)
    errs["embedding"] = rel_error(dtable, central_diff(lambda: float(np.sum(nx.embedding(table, ids) * r)),
                                                       table))

    logits, targets = gen.standard_normal((4, 6)), gen.integers(0, 6, size=4)
    _, probs = nx.cross_entropy(logits, targets)
    dl = nx.cross_entropy_backward(probs, targets)
    errs["cross_entropy"] = rel_error(dl, central_diff(lambda: nx.cross_entropy(logits, targets)[0], logits))
    return errs


@pytest.mark.parametrize("seed", range(5))
def test_kernel_gradients_match_finite_differences(seed):
    errs = kernel_gradient_errors(seed)
    assert max(errs.values()) < 1e-6, errs


def test_cross_entropy_backward_scale_is_linear():
    gen = np.random.default_rng(0)
    logits, targets = gen.standard_normal((3, 4)), np.array([0, 1, 3])
    _, probs = nx.cross_entropy(logits, targets)
    np.testing.assert_allclose(nx.cross_entropy_backward(probs, targets, 2.5),
                               2.5 * nx.cross_entropy_backward(probs, targets), rtol=1e-15)


def test_kernels_bitwise_deterministic():
    gen = np.random.default_rng(9)
    ids = gen.integers(0, 50, size=(8, 32))
    dout = gen.standard_normal((8, 32, 16)).astype(np.float32)
    first = nx.embedding_backward(dout, ids, 50)
    for _ in range(3):
        assert np.array_equal(first, nx.embedding_backward(dout, ids, 50))


# -- RNG -------------------------------------------------------------------


def test_rng_same_seed_same_stream():
    assert np.array_equal(nx.Rng(5).normal((10,)), nx.Rng(5).normal((10,)))
    assert not np.array_equal(nx.Rng(5).normal((10,)), nx.Rng(6).normal((10,)))


def test_rng_substreams_are_named_and_independent():
    root = nx.Rng(5)
    a1 = root.substream("init").integers(0, 1 << 30, size=8)
    a2 = nx.Rng(5).substream("init").integers(0, 1 << 30, size=8)
    b = root.substream("data").integers(0, 1 << 30, size=8)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_rng_state_roundtrip():
    rng = nx.Rng(11)
    rng.normal((3,))
    clone = nx.Rng.from_state(rng.get_state())
    assert np.array_equal(rng.integers(0, 1000, size=20), clone.integers(0, 1000, size=20))
