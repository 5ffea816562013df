import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbilevel.numerics import RandomStream, finite_diff_grad
from fedbilevel.problems import QuadQuad, RidgeHyper, SmoothnessConstants, UnsupportedCapability, load_ridge_csv


def _point(rng, n, scale=1.0):
    return scale * rng.standard_normal(n)


@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 2.0), st.floats(1.0, 5.0), st.integers(0, 100))
@settings(max_examples=40, deadline=None)
def test_quadquad_spectrum_spans_mu_L1(dx, dy, mu, ratio, seed):
    L1 = mu * ratio
    q = QuadQuad.random(dx, dy, mu=mu, L1=L1, seed=seed)
    eigs = np.linalg.eigvalsh(q.A)
    assert eigs[0] == pytest.approx(mu, rel=1e-9)
    if dy > 1:
        assert eigs[-1] == pytest.approx(L1, rel=1e-9)
    assert np.linalg.norm(q.B, 2) == pytest.approx(1.0, rel=1e-9)


def test_quadquad_gradients_match_finite_differences(small_quad, rng):
    q = small_quad
    x, y = _point(rng, q.d_x), _point(rng, q.d_y)
    assert np.allclose(q.grad_x_f(x, y), finite_diff_grad(lambda z: q.f_value(z, y), x), atol=1e-7)
    assert np.allclose(q.grad_y_f(x, y), finite_diff_grad(lambda z: q.f_value(x, z), y), atol=1e-7)
    assert np.allclose(q.grad_y_g(x, y), finite_diff_grad(lambda z: q.g_value(x, z), y), atol=1e-7)
    v = _point(rng, q.d_y)
    H = np.array([finite_diff_grad(lambda z: q.grad_y_g(x, z)[i], y) for i in range(q.d_y)])
    assert np.allclose(q.hvp_yy_g(x, y, v), H @ v, atol=1e-6)
    J = np.array([finite_diff_grad(lambda z: q.grad_y_g(z, y)[i], x) for i in range(q.d_y)])
    assert np.allclose(q.jvp_xy_g(x, y, v), J.T @ v, atol=1e-6)
    assert np.allclose(q.jacobian_xy(x, y), J.T, atol=1e-6)


def test_quadquad_lower_solution_is_stationary(small_quad, rng):
    x = _point(rng, small_quad.d_x)
    ystar = small_quad.exact_lower_solution(x)
    assert np.allclose(small_quad.grad_y_g(x, ystar), 0, atol=1e-12)


def test_quadquad_exact_hypergradient_agrees_with_closed_form_and_fd(small_quad, rng):
    for _ in range(5):
        x = _point(rng, small_quad.d_x, 2.0)
        exact = small_quad.exact_hypergradient(x)
        assert np.allclose(exact, small_quad.closed_form_hypergradient(x), rtol=1e-10, atol=1e-12)
        assert np.allclose(exact, finite_diff_grad(small_quad.phi, x), rtol=1e-6, atol=1e-8)


def test_phi_minimizer_is_stationary(small_quad):
    xs = small_quad.phi_minimizer()
    assert np.linalg.norm(small_quad.exact_hypergradient(xs)) < 1e-10


def test_fault_flips_implicit_term(small_quad, rng):
    x = _point(rng, small_quad.d_x)
    y = small_quad.exact_lower_solution(x)
    direct = small_quad.grad_x_f(x, y)
    good = small_quad.exact_hypergradient(x)
    bad = small_quad.with_fault().exact_hypergradient(x)
    assert np.allclose(bad - direct, -(good - direct))
    assert small_quad.implicit_sign == -1.0


def test_samples_replay_and_average_out(small_quad):
    x, y = np.zeros(small_quad.d_x), np.zeros(small_quad.d_y)
    zeta, nxt = small_quad.draw_lower(RandomStream(0, 3))
    assert np.array_equal(small_quad.grad_y_g(x, y, zeta), small_quad.grad_y_g(x, y, zeta))
    assert nxt.counter == small_quad.d_y
    s, total, n = RandomStream(1), np.zeros(small_quad.d_y), 20_000
    for _ in range(n):
        zeta, s = small_quad.draw_lower(s)
        total += small_quad.grad_y_g(x, y, zeta)
    assert np.allclose(total / n, small_quad.grad_y_g(x, y), atol=5 * 0.2 / np.sqrt(n))


def test_quadquad_smoothness_constants(small_quad):
    sc = small_quad.smoothness_constants()
    assert sc.mu == pytest.approx(0.5)
    assert sc.L1 >= 3.0
    assert sc.sigma == pytest.approx(0.2 * 2.0)
    assert small_quad.with_noise(0.0).smoothness_constants().sigma == 0.0


def test_quadquad_validation():
    with pytest.raises(ValueError):
        QuadQuad(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2))
    with pytest.raises(ValueError):
        QuadQuad(-np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        QuadQuad.random(2, 2, mu=2.0, L1=1.0)
    q = QuadQuad(np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        q.grad_y_g(np.zeros(3), np.zeros(2))


def test_smoothness_constants_validation():
    with pytest.raises(ValueError):
        SmoothnessConstants(mu=0.0, L0=1.0, L1=1.0)
    with pytest.raises(ValueError):
        SmoothnessConstants(mu=2.0, L0=1.0, L1=1.0)


@pytest.fixture(scope="module")
def ridge():
    return RidgeHyper.synthetic(n_train=40, n_val=20, d=3, noise=0.3, seed=2)


def test_ridge_derivatives_match_finite_differences(ridge, rng):
    x, y, v = _point(rng, 3, 0.5), _point(rng, 3), _point(rng, 3)
    g = lambda xx, yy: (  # noqa: E731
        0.5 * np.mean((ridge.X_train @ yy - ridge.t_train) ** 2) + 0.5 * np.sum(np.exp(xx) * yy**2)
    )
    assert np.allclose(ridge.grad_y_g(x, y), finite_diff_grad(lambda z: g(x, z), y), atol=1e-7)
    assert np.allclose(ridge.grad_y_f(x, y), finite_diff_grad(lambda z: ridge.f_value(x, z), y), atol=1e-7)
    H = np.array([finite_diff_grad(lambda z: ridge.grad_y_g(x, z)[i], y) for i in range(3)])
    assert np.allclose(ridge.hvp_yy_g(x, y, v), H @ v, atol=1e-6)
    J = np.array([finite_diff_grad(lambda z: ridge.grad_y_g(z, y)[i], x) for i in range(3)])
    assert np.allclose(ridge.jvp_xy_g(x, y, v), J.T @ v, atol=1e-6)


def test_ridge_per_sample_gradients_average_to_full(ridge, rng):
    x, y = _point(rng, 3, 0.5), _point(rng, 3)
    per = np.mean([ridge.grad_y_g(x, y, i) for i in range(len(ridge.t_train))], axis=0)
    assert np.allclose(per, ridge.grad_y_g(x, y))
    per = np.mean([ridge.grad_y_f(x, y, i) for i in range(len(ridge.t_val))], axis=0)
    assert np.allclose(per, ridge.grad_y_f(x, y))


def test_ridge_hypergradient_matches_fd(ridge, rng):
    x = _point(rng, 3, 0.5)
    assert np.allclose(ridge.exact_hypergradient(x), finite_diff_grad(ridge.phi, x), rtol=1e-5, atol=1e-8)


def test_ridge_draws_are_row_indices(ridge):
    i, s = ridge.draw_lower(RandomStream(0))
    j, _ = ridge.draw_upper(s)
    assert 0 <= i < 40 and 0 <= j < 20


def test_base_oracle_without_exact_solution_raises():
    from fedbilevel.problems import BilevelOracle

    with pytest.raises(UnsupportedCapability):
        BilevelOracle().exact_lower_solution(np.zeros(1))


def test_load_ridge_csv(tmp_path):
    rows = ["a,target,b"] + [f"{i},{2 * i + 1},{i % 3}" for i in range(10)]
    p = tmp_path / "data.csv"
    p.write_text("\n".join(rows) + "\n")
    r1 = load_ridge_csv(p, val_ratio=0.3, seed=1)
    r2 = load_ridge_csv(p, val_ratio=0.3, seed=1)
    assert r1.d_x == 2 and len(r1.t_val) == 3 and len(r1.t_train) == 7
    assert np.array_equal(r1.X_train, r2.X_train)
    # the target column is removed from the features
    assert sorted(np.concatenate([r1.t_train, r1.t_val])) == [2.0 * i + 1 for i in range(10)]
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n3,4\n")
    with pytest.raises(ValueError, match="target"):
        load_ridge_csv(tmp_path / "bad.csv")
    (tmp_path / "ragged.csv").write_text("a,target\n1,2\n3\n")
    with pytest.raises(ValueError, match="ragged.csv:3"):
        load_ridge_csv(tmp_path / "ragged.csv")
