import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbilevel.numerics import RandomStream, check_finite, default_step, finite_diff_grad, gaussian_vec

seeds = st.integers(min_value=0, max_value=2**63 - 1)


@given(seeds, st.integers(0, 1000), st.integers(0, 10**9), st.integers(1, 50))
def test_draw_is_pure_function_of_key_and_counter(seed, sid, ctr, dim):
    a, na = RandomStream(seed, sid, ctr).gaussian(dim)
    b, nb = RandomStream(seed, sid, ctr).gaussian(dim)
    assert np.array_equal(a, b)
    assert na == nb == RandomStream(seed, sid, ctr + dim)


def test_snapshot_is_not_mutated():
    s = RandomStream(5, 2, 0)
    first, _ = s.gaussian(4)
    s.gaussian(4)
    again, _ = s.gaussian(4)
    assert np.array_equal(first, again)


@given(seeds, st.integers(0, 100), st.integers(1, 20))
@settings(max_examples=50)
def test_distinct_streams_and_counters_differ(seed, sid, dim):
    base, nxt = RandomStream(seed, sid).gaussian(dim)
    assert not np.array_equal(base, RandomStream(seed, sid + 1).gaussian(dim)[0])
    assert not np.array_equal(base, nxt.gaussian(dim)[0])


def test_successive_blocks_do_not_overlap():
    # a draw of n values must not reappear shifted in the next block
    s = RandomStream(0, 0)
    a, s = s.gaussian(8)
    b, _ = s.gaussian(8)
    assert not set(a.round(12)) & set(b.round(12))


def test_gaussian_moments():
    v, _ = RandomStream(42).gaussian(200_000, 2.0)
    assert abs(v.mean()) < 0.02
    assert abs(v.std() - 2.0) < 0.02


def test_zero_std_and_errors():
    v, nxt = gaussian_vec(RandomStream(1), 3, 0.0)
    assert np.array_equal(v, np.zeros(3))
    assert nxt.counter == 3
    with pytest.raises(ValueError):
        gaussian_vec(RandomStream(1), 0, 1.0)
    with pytest.raises(ValueError):
        gaussian_vec(RandomStream(1), 3, -1.0)


def test_substream_independent_and_deterministic():
    s = RandomStream(3, 1)
    assert s.substream(7) == s.substream(7)
    assert s.substream(7) != s.substream(8)
    assert not np.array_equal(s.substream(7).gaussian(5)[0], s.gaussian(5)[0])


def test_integers_and_uniform_ranges():
    ints, s = RandomStream(9).integers(5, 1000)
    assert ints.min() >= 0 and ints.max() < 5
    u, _ = s.uniform(-1.0, 2.0, 1000)
    assert u.min() >= -1.0 and u.max() < 2.0


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_finite_diff_on_quadratic(xs):
    x = np.array(xs)
    M = np.diag(np.arange(1, x.size + 1, dtype=float))
    fd = finite_diff_grad(lambda z: 0.5 * z @ M @ z + np.sum(z), x)
    assert np.allclose(fd, M @ x + 1, rtol=1e-7, atol=1e-7)


def test_finite_diff_on_nonlinear_and_step():
    x = np.array([0.3, -1.2])
    fd = finite_diff_grad(lambda z: np.sin(z[0]) * np.exp(z[1]), x)
    exact = np.array([np.cos(0.3) * np.exp(-1.2), np.sin(0.3) * np.exp(-1.2)])
    assert np.allclose(fd, exact, rtol=1e-8)
    assert default_step(np.array([-4.0, 1.0])) == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        finite_diff_grad(np.sum, x, h=0.0)


def test_check_finite():
    check_finite("ok", np.ones(2))
    with pytest.raises(FloatingPointError):
        check_finite("bad", np.array([1.0, np.nan]))
