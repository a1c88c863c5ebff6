import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptlab.numeric import (
    RngStream,
    log_sigmoid,
    log_softmax,
    rmsnorm,
    rope_apply,
    rope_rotate,
    rotate_pair,
    sigmoid,
    softmax,
    softplus,
    sparsemax,
    swiglu,
    swish,
)
from adaptlab.oracles import simplex_projection_bruteforce

finite = st.floats(-50, 50, allow_nan=False)
vectors = arrays(np.float64, st.integers(1, 8), elements=finite)


def test_softmax_examples():
    assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]
    assert softmax([1000.0, 1000.0]).tolist() == [0.5, 0.5]
    np.testing.assert_allclose(softmax([1.0, 0.0]), [0.7310585786300049, 0.2689414213699951], rtol=0, atol=1e-15)


def test_softmax_rejects_empty():
    with pytest.raises(ValueError):
        softmax([])


@given(vectors, st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(z, c):
    p = softmax(z)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(softmax(z + c), p, rtol=0, atol=1e-12)


@given(vectors)
def test_log_softmax_matches_log_of_softmax(z):
    np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), rtol=0, atol=1e-12)


def test_log_sigmoid_examples():
    assert log_sigmoid(0.0) == -math.log(2)
    assert log_sigmoid(0.1) == pytest.approx(-0.6443966600735709, abs=1e-15)
    assert log_sigmoid(-100.0) == pytest.approx(-100.0, abs=1e-40)
    assert log_sigmoid(-700.0) == -700.0
    assert np.isfinite(log_sigmoid(-700.0))


@given(st.floats(-700, 700))
def test_sigmoid_family_consistent(x):
    s = sigmoid(x)
    assert 0.0 <= s <= 1.0
    assert log_sigmoid(x) == pytest.approx(-softplus(-x), abs=1e-12)
    assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-15)


def test_sparsemax_examples():
    assert sparsemax([0.5, 0.5]).tolist() == [0.5, 0.5]
    assert sparsemax([2.0, 0.0]).tolist() == [1.0, 0.0]
    np.testing.assert_allclose(sparsemax([0.3, 0.2, 0.1]), simplex_projection_bruteforce([0.3, 0.2, 0.1]),
                               rtol=0, atol=1e-12)


def test_sparsemax_ties_at_threshold_enter_support():
    # both tied entries share the mass, neither is dropped
    assert sparsemax([1.0, 1.0, -5.0]).tolist() == [0.5, 0.5, 0.0]


def test_sparsemax_rejects_empty():
    with pytest.raises(ValueError):
        sparsemax([])


@given(vectors)
def test_sparsemax_is_simplex_projection(z):
    p = sparsemax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    if z.size <= 6:
        np.testing.assert_allclose(p, simplex_projection_bruteforce(z), rtol=0, atol=1e-10)


@given(vectors, st.floats(-100, 100))
def test_sparsemax_shift_invariance(z, c):
    np.testing.assert_allclose(sparsemax(z + c), sparsemax(z), rtol=0, atol=1e-9)


def test_sparsemax_along_axis():
    Z = np.array([[2.0, 0.0], [0.5, 0.5]])
    assert sparsemax(Z, axis=1).tolist() == [[1.0, 0.0], [0.5, 0.5]]
    assert sparsemax(Z.T, axis=0).tolist() == [[1.0, 0.5], [0.0, 0.5]]


def test_rmsnorm_examples():
    assert rmsnorm([1.0, 1.0], [1.0, 1.0], eps=0.0).tolist() == [1.0, 1.0]
    np.testing.assert_allclose(rmsnorm([3.0, 4.0], [1.0, 1.0], eps=0.0), [0.848528137423857, 1.131370849898476],
                               rtol=0, atol=1e-15)
    assert rmsnorm([0.0, 0.0], [1.0, 1.0], eps=1e-6).tolist() == [0.0, 0.0]


def test_rmsnorm_dim_mismatch():
    with pytest.raises(ValueError):
        rmsnorm([1.0, 2.0, 3.0], [1.0, 1.0])


@given(arrays(np.float64, st.integers(1, 10), elements=finite).filter(lambda x: np.any(np.abs(x) > 1e-3)))
def test_rmsnorm_unit_rms(x):
    y = rmsnorm(x, np.ones_like(x), eps=0.0)
    assert abs(math.sqrt(np.mean(y * y)) - 1.0) <= 1e-9


def test_swiglu_examples():
    assert swiglu([0.0], [5.0]).tolist() == [0.0]
    assert swiglu([1.0], [2.0])[0] == pytest.approx(1.4621171572600098, abs=1e-15)
    assert swiglu([-20.0], [1.0])[0] == pytest.approx(-4.122307236380407e-08, rel=1e-12)
    assert swish(np.array([0.0])).tolist() == [0.0]
    with pytest.raises(ValueError):
        swiglu([1.0, 2.0], [1.0])


def test_rope_examples():
    pair = np.array([0.3, -1.7])
    assert rope_rotate(pair, 0, 1e6, 3, 8).tolist() == pair.tolist()
    np.testing.assert_allclose(rotate_pair([1.0, 0.0], math.pi / 2), [0.0, 1.0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(rope_rotate([1.0, 0.0], 1, 10000.0, 0, 4), [math.cos(1), math.sin(1)],
                               rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        rope_rotate([1.0, 0.0], 1, 10000.0, 0, 5)
    with pytest.raises(ValueError):
        rope_rotate([1.0, 0.0], 1, 10000.0, 2, 4)


@given(st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 10_000), st.integers(0, 7))
def test_rope_preserves_norm(a, b, pos, i):
    out = rope_rotate([a, b], pos, 1e6, i, 16)
    assert abs(math.hypot(*out) - math.hypot(a, b)) <= 1e-12


def test_rope_apply_matches_pairwise():
    rng = RngStream(3)
    x = rng.normal((5, 6))
    y = rope_apply(x, range(5), 10000.0)
    for t in range(5):
        for i in range(3):
            np.testing.assert_allclose(y[t, 2 * i:2 * i + 2], rope_rotate(x[t, 2 * i:2 * i + 2], t, 10000.0, i, 6),
                                       rtol=0, atol=1e-15)


def test_rng_frozen_draws():
    r = RngStream(42)
    assert r.normal(3).tolist() == [0.3375714466967798, -0.7821534784435413, -0.3160252007782352]
    assert r.spawn("a").integers(0, 100, 3).tolist() == [1, 23, 69]


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_rng_reproducible(seed, stream):
    a, b = RngStream(seed, stream), RngStream(seed, stream)
    assert a.normal(5).tolist() == b.normal(5).tolist()
    assert a.spawn("x").uniform(3).tolist() == b.spawn("x").uniform(3).tolist()


def test_rng_spawn_independent_of_parent_draws():
    a, b = RngStream(9), RngStream(9)
    a.normal(100)
    assert a.spawn("child").normal(4).tolist() == b.spawn("child").normal(4).tolist()
    assert a.spawn("c1").normal(4).tolist() != a.spawn("c2").normal(4).tolist()


def test_choice_index_inverse_cdf():
    r = RngStream(0)
    draws = [r.choice_index([0.0, 1.0, 0.0]) for _ in range(20)]
    assert set(draws) == {1}
