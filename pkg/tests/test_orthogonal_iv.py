from __future__ import annotations

import numpy as np
import pytest

from hdiv.dgp import draw, make_params, true_nuisance
from hdiv.errors import ConfigError, EstimationError, WeakIdentificationError
from hdiv.orthogonal_iv import (
    Dataset, NuisanceEstimate, c_alpha_statistic, confidence_sets, estimate_alpha, estimate_alpha_from_gammas,
    estimate_nuisance, gamma_matrices, infer, moment_psi, omega_hat, one_step_estimate, sandwich,
    score_statistic, variance_estimate,
)


@pytest.fixture(scope="module")
def sim_draw():
    s = draw(make_params(), 2024)
    return s, estimate_nuisance(s.data)


def true_eta(params):
    th, vt, g, dl = true_nuisance(params)
    pad = lambda a: np.concatenate([[0.0], a])  # intercept coefficient
    return NuisanceEstimate.from_arrays(pad(th), pad(vt), pad(g), dl)


def random_eta(rng, data):
    return NuisanceEstimate.from_arrays(rng.standard_normal(data.p_x), rng.standard_normal((data.p_x, data.p_d)),
                                        rng.standard_normal((data.p_x, data.p_d)),
                                        rng.standard_normal((data.p_z, data.p_d)))


def small_data(rng, n=30, p_d=1):
    return Dataset(y=rng.standard_normal(n), D=rng.standard_normal((n, p_d)),
                   X=np.hstack([np.ones((n, 1)), rng.standard_normal((n, 3))]), Z=rng.standard_normal((n, 2 + p_d)))


def test_dataset_validation(rng):
    with pytest.raises(ConfigError):
        Dataset(y=np.ones(3), D=np.ones((4, 1)), X=np.ones((3, 1)), Z=np.ones((3, 1)))
    with pytest.raises(ConfigError):
        Dataset(y=np.ones(3), D=np.ones((3, 1)), X=np.ones((3, 1)), Z=np.ones((3, 1)), intercept=2)


def test_psi_all_zero(rng):
    data = small_data(rng)
    eta = NuisanceEstimate.from_arrays(np.zeros(4), np.zeros(4), np.zeros(4), np.zeros(3))
    assert np.all(moment_psi(data, 0.0, eta) == 0)


def test_psi_hand_case():
    data = Dataset(y=[2.0], D=[[1.0]], X=[[1.0]], Z=[[1.0]], intercept=None)
    eta = NuisanceEstimate.from_arrays([1.0], [0.0], [0.0], [1.0])
    assert moment_psi(data, 1.0, eta)[0, 0] == 0.0


def test_psi_matches_scalar_transcription(rng):
    data = small_data(rng, n=3)
    eta = random_eta(rng, data)
    a = 0.37
    for i in range(3):
        x, z = data.X[i], data.Z[i]
        rho_y = data.y[i] - sum(x[j] * eta.theta[j] for j in range(4))
        rho_d = data.D[i, 0] - sum(x[j] * eta.vartheta[j, 0] for j in range(4))
        inst = (sum(x[j] * (eta.gamma[j, 0] - eta.vartheta[j, 0]) for j in range(4))
                + sum(z[j] * eta.delta[j, 0] for j in range(3)))
        assert moment_psi(data, a, eta)[i, 0] == pytest.approx((rho_y - a * rho_d) * inst, abs=1e-12)


def test_affine_identity(rng):
    data = small_data(rng, p_d=2)
    eta = random_eta(rng, data)
    g1, g2 = gamma_matrices(data, eta)
    for _ in range(5):
        a = rng.standard_normal(2)
        np.testing.assert_allclose(moment_psi(data, a, eta).mean(axis=0), g1 @ a + g2, atol=1e-12)


def test_degenerate_instrument_gives_zero_gammas(rng):
    data = Dataset(y=rng.standard_normal(20), D=rng.standard_normal((20, 1)),
                   X=np.hstack([np.ones((20, 1)), rng.standard_normal((20, 2))]), Z=rng.standard_normal((20, 2)))
    g = rng.standard_normal(3)
    eta = NuisanceEstimate.from_arrays(rng.standard_normal(3), g, g, np.zeros(2))
    g1, g2 = gamma_matrices(data, eta)
    assert np.all(g1 == 0) and np.all(g2 == 0)
    with pytest.raises(WeakIdentificationError):
        estimate_alpha(data, eta)


def test_gamma1_near_population_value(sim_draw):
    s, eta = sim_draw
    p = make_params()
    pop = 0.125**2 * float(p.delta @ p.delta)  # E[varrho^2]
    g1, _ = gamma_matrices(s.data, eta)
    assert -g1[0, 0] == pytest.approx(pop, rel=0.35)


def test_omega_examples(rng):
    n = 10
    data = Dataset(y=np.tile([1.0, -1.0], n // 2), D=np.zeros((n, 1)), X=np.ones((n, 1)), Z=np.ones((n, 1)))
    eta = NuisanceEstimate.from_arrays([0.0], [0.0], [0.0], [1.0])
    assert omega_hat(data, 0.0, eta)[0, 0] == 1.0
    zero = NuisanceEstimate.from_arrays([0.0], [0.0], [0.0], [0.0])
    assert omega_hat(data, 0.0, zero)[0, 0] == 0.0


def test_omega_positive_on_draw(sim_draw):
    s, eta = sim_draw
    assert omega_hat(s.data, 0.0, eta)[0, 0] > 0


def test_score_hand_case():
    n = 100
    spread = np.sqrt(4 - 0.2**2)
    y = 0.2 + spread * np.tile([1.0, -1.0], n // 2)
    data = Dataset(y=y, D=np.zeros((n, 1)), X=np.ones((n, 1)), Z=np.ones((n, 1)))
    eta = NuisanceEstimate.from_arrays([0.0], [0.0], [0.0], [1.0])
    assert score_statistic(data, 0.0, eta)[0] == pytest.approx(1.0, abs=1e-12)
    assert c_alpha_statistic(data, 0.0, eta) == pytest.approx(1.0, abs=1e-12)


def test_score_zero_when_moment_zero(rng):
    data = small_data(rng)
    eta = random_eta(rng, data)
    a = estimate_alpha(data, eta)
    assert abs(score_statistic(data, a, eta)[0]) <= 1e-10


def test_c_alpha_is_squared_norm(rng):
    data = small_data(rng, n=50, p_d=2)
    eta = random_eta(rng, data)
    a = rng.standard_normal(2)
    s = score_statistic(data, a, eta)
    assert c_alpha_statistic(data, a, eta) == pytest.approx(float(s @ s), rel=1e-14)


def test_estimate_alpha_scalar_hand_case():
    assert estimate_alpha_from_gammas(-1.0, 0.5)[0] == pytest.approx(0.5)


def test_noiseless_exact_recovery():
    p = make_params(200, 30, 10, alpha0=0.7)
    s = draw(p, 5, noiseless=True)
    eta = true_eta(p)
    a = estimate_alpha(s.data, eta)
    assert a[0] == pytest.approx(0.7, abs=1e-10)
    sets = confidence_sets(s.data, eta, 0.95, grid=np.array([0.7]))
    assert sets.accept.all()
    lo, hi = sets.wald[0]
    assert lo - 1e-12 <= 0.7 <= hi + 1e-12


def test_estimator_minimizes_moment_norm(sim_draw, rng):
    s, eta = sim_draw
    a = estimate_alpha(s.data, eta)
    g1, g2 = gamma_matrices(s.data, eta)
    best = np.linalg.norm(g1 @ a + g2)
    for cand in a + rng.uniform(-2, 2, 100):
        assert best <= np.linalg.norm(moment_psi(s.data, cand, eta).mean(axis=0)) + 1e-15


def test_one_step(sim_draw, rng):
    s, eta = sim_draw
    a = estimate_alpha(s.data, eta)
    assert abs(one_step_estimate(s.data, a, eta)[0] - a[0]) <= 1e-12
    assert abs(one_step_estimate(s.data, [0.3], eta)[0] - a[0]) <= 1e-10
    data = small_data(rng, n=40, p_d=2)
    eta2 = random_eta(rng, data)
    a2 = estimate_alpha(data, eta2)
    for _ in range(5):
        np.testing.assert_allclose(one_step_estimate(data, rng.standard_normal(2) * 10, eta2), a2, atol=1e-10)


def test_sandwich_hand_case():
    v = sandwich(-2.0, 8.0, 200)
    assert v.V[0, 0] == pytest.approx(2.0)
    assert v.se[0] == pytest.approx(0.1)
    with pytest.raises(WeakIdentificationError):
        sandwich(0.0, 1.0, 10)


def test_variance_psd(rng):
    data = small_data(rng, n=60, p_d=2)
    eta = random_eta(rng, data)
    V = variance_estimate(data, estimate_alpha(data, eta), eta).V
    np.testing.assert_allclose(V, V.T, atol=0)
    assert np.linalg.eigvalsh(V).min() >= -1e-12


def test_confidence_level_monotone(sim_draw):
    s, eta = sim_draw
    wide = confidence_sets(s.data, eta, 0.95)
    narrow = confidence_sets(s.data, eta, 0.5, grid=wide.grid)
    assert np.diff(narrow.wald[0]) < np.diff(wide.wald[0])
    assert narrow.accept.sum() < wide.accept.sum()
    assert np.all(wide.accept[narrow.accept])
    with pytest.raises(ConfigError):
        confidence_sets(s.data, eta, 1.5)


def test_infer_on_draw(sim_draw):
    s, eta = sim_draw
    res = infer(s.data, eta=eta, alpha0=0.0)
    assert res.converged
    lo, hi = res.inversion_interval
    assert lo < res.alpha[0] < hi
    assert res.wald_ci[0, 0] < res.wald_ci[0, 1]
    assert res.se_homoscedastic_iv[0] > 0 and res.se_robust[0] > 0
    assert res.calpha_at_alpha0 >= 0


def test_nuisance_steps_on_draw(sim_draw):
    s, eta = sim_draw
    assert eta.converged
    assert np.setdiff1d(eta.steps[(1, 0)].support, [0]).size > 0
    assert set(eta.steps) == {(1, 0), (2, None), (3, 0)}


def test_zero_outcome_gives_zero_theta(rng):
    s = draw(make_params(100, 20, 5), 1)
    d = s.data
    eta = estimate_nuisance(Dataset(y=np.zeros(d.n), D=d.D, X=d.X, Z=d.Z))
    assert np.all(eta.theta == 0)


def test_no_instruments_reduces_to_partialling_out(rng):
    n = 200
    x = rng.standard_normal((n, 10))
    X = np.hstack([np.ones((n, 1)), x])
    d = 2 * x[:, 0] + rng.standard_normal(n)
    data = Dataset(y=d + rng.standard_normal(n), D=d[:, None], X=X, Z=np.zeros((n, 0)))
    eta = estimate_nuisance(data)
    if np.array_equal(eta.steps[(1, 0)].support, eta.steps[(3, 0)].support):
        np.testing.assert_allclose(eta.vartheta[:, 0], eta.gamma[:, 0], atol=1e-10)


def test_translation_consistency(rng):
    data = small_data(rng)
    eta = random_eta(rng, data)
    c = rng.standard_normal(data.p_x)
    shifted = Dataset(y=data.y + data.X @ c, D=data.D, X=data.X, Z=data.Z)
    eta2 = NuisanceEstimate.from_arrays(eta.theta + c, eta.vartheta, eta.gamma, eta.delta)
    np.testing.assert_allclose(moment_psi(shifted, 0.4, eta2), moment_psi(data, 0.4, eta), atol=1e-12)


def test_estimation_error_names_step(rng):
    def failing(F, target, cfg, forced):
        raise WeakIdentificationError("boom")

    with pytest.raises(EstimationError) as e:
        estimate_nuisance(small_data(rng), fitter=failing)
    assert e.value.step == 1 and e.value.k == 0


def test_sample_gradient_shrinks_with_pooled_draws():
    p = make_params(100_000, 4, 2)
    eta = true_eta(p)
    N = 0
    total = None
    for chunk in range(10):
        s = draw(p, 900 + chunk)
        X, Z = s.data.X, s.data.Z
        rho_y = s.data.y - X @ eta.theta
        rho_d = s.data.D[:, 0] - X @ eta.vartheta[:, 0]
        resid = rho_y - p.alpha0 * rho_d
        v = X @ (eta.gamma[:, 0] - eta.vartheta[:, 0]) + Z @ eta.delta[:, 0]
        grads = np.concatenate([
            -(X * v[:, None]).sum(0),                                  # theta
            (p.alpha0 * X * v[:, None] - X * resid[:, None]).sum(0),    # vartheta
            (X * resid[:, None]).sum(0),                                # gamma
            (Z * resid[:, None]).sum(0),                                # delta
        ])
        total = grads if total is None else total + grads
        N += p.n
    assert N == 10**6
    assert np.max(np.abs(total / N)) < 5 / np.sqrt(N)
