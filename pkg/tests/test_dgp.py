from __future__ import annotations

import numpy as np
import pytest

from hdiv.dgp import draw, make_params, nu_constant, population_covariance, true_nuisance
from hdiv.errors import ConfigError


def test_nu_and_beta():
    nu = sum(1.0 / j**2 for j in range(5, 201)) + 4 / 9
    assert nu_constant(200) == pytest.approx(nu, rel=1e-15)
    assert nu == pytest.approx(0.66078, abs=1e-5)
    p = make_params()
    assert p.beta[0] == pytest.approx(1 / (9 * nu), rel=1e-14)
    assert p.beta[0] == pytest.approx(0.16817, abs=5e-5)  # quoted value is rounded; oracle above is exact
    assert p.beta[9] == pytest.approx(1 / (100 * nu), rel=1e-14)
    np.testing.assert_array_equal(p.beta, p.gamma)


def test_delta_values():
    p = make_params()
    assert (p.delta[0], p.delta[1], p.delta[9]) == (3.0, 0.75, 0.03)


def test_boundary_nu():
    assert nu_constant(4) == 4 / 9


def test_pz_exceeds_px():
    with pytest.raises(ConfigError):
        make_params(p_x=5, p_z=6)


def test_structure():
    p = make_params(50, 20, 10)
    L = np.linalg.cholesky(p.Sigma)
    assert np.max(np.abs(L @ L.T - p.Sigma)) <= 1e-10
    assert p.Sigma[0, 3] == 0.125
    assert np.all(p.Pi[:, 10:] == 0)
    np.testing.assert_array_equal(p.Pi[:, :10], np.eye(10))


def test_determinism():
    p = make_params(50, 20, 10)
    a, b = draw(p, 42), draw(p, 42)
    for f in ("y", "D", "X", "Z"):
        np.testing.assert_array_equal(getattr(a.data, f), getattr(b.data, f))
    assert not np.array_equal(a.data.y, draw(p, 43).data.y)


def test_large_sample_moments():
    p = make_params(100_000, 4, 2)
    s = draw(p, 7)
    x = s.data.X[:, 1:]
    assert np.mean(x[:, 0] * x[:, 1]) == pytest.approx(0.5, abs=0.01)
    assert np.corrcoef(s.eps, s.u)[0, 1] == pytest.approx(0.6, abs=0.01)
    assert np.max(np.abs(x.T @ s.eps / p.n)) <= 5 / np.sqrt(p.n) * (1 + x.std(axis=0).max())


def test_regression_identity_and_side_info():
    p = make_params(200, 30, 10, alpha0=0.4)
    s = draw(p, 3)
    x = s.data.X[:, 1:]
    d = s.data.D[:, 0]
    assert np.max(np.abs(s.data.y - p.alpha0 * d - x @ p.beta - 2 * s.eps)) <= 1e-12
    np.testing.assert_allclose(s.side.E_d_given_x, x @ (p.gamma + p.Pi.T @ p.delta), atol=1e-12)
    np.testing.assert_allclose(d - s.side.E_d_given_x - s.side.zeta_delta * 0.125, s.u, atol=1e-12)
    assert np.all(s.data.X[:, 0] == 1.0) and s.data.intercept == 0


def test_population_covariance_matches_monte_carlo():
    p = make_params(200_000, 5, 3, alpha0=0.5)
    s = draw(p, 11)
    w = np.column_stack([s.data.y, s.data.D[:, 0], s.data.X[:, 1:], s.data.Z])
    emp = w.T @ w / p.n
    pop = population_covariance(p)
    sd = np.sqrt(np.outer(np.diag(pop), np.diag(pop)))
    assert np.max(np.abs(emp - pop) / sd) < 0.02


def test_true_nuisance_zeroes_population_residual_covariances():
    p = make_params(10, 8, 4, alpha0=0.3)
    th, vt, g, dl = true_nuisance(p)
    S = population_covariance(p)
    f = slice(2, None)
    # d - x'vartheta is orthogonal to x; y - x'theta - alpha0 (d - x'vartheta) is orthogonal to (x, z)
    sx = S[2:10, :]
    assert np.max(np.abs(sx[:, 1] - S[2:10, 2:10] @ vt)) < 1e-12
    resid_y = np.concatenate([[1.0, -p.alpha0], -th + p.alpha0 * vt, np.zeros(4)])
    assert np.max(np.abs(S[f] @ resid_y)) < 1e-12
    np.testing.assert_array_equal(g, p.gamma)
    np.testing.assert_array_equal(dl, p.delta)
