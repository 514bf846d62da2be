"""Property suites behind ``hdiv check``.

Each suite returns a list of :class:`CheckResult`; the acceptance tests call
the same functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dgp import make_params, population_covariance, true_nuisance
from .harness import SimulationConfig, aggregate, run_simulation
from .lasso import LassoConfig, lasso_fit, lasso_objective
from .numkit import chi_square_quantile
from .orthogonalize import GmmGeometry, gmm_mu0, orthogonality_check, population_iv_moment


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    bound: str
    passed: bool

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.value:.4g} (required {self.bound})"


def proximal_gradient_lasso(X, y, lam, loadings, unpenalized=(), max_iter=1_000_000, tol=1e-15):
    """Reference Lasso solver: proximal gradient with step ``1/(2L)``,
    ``L`` the largest eigenvalue of ``(2/n) X'X``."""
    n, p = X.shape
    L = np.linalg.eigvalsh(2.0 / n * X.T @ X).max()
    step = 1.0 / (2.0 * L)
    thr = step * lam / n * np.asarray(loadings, dtype=float)
    thr[list(unpenalized)] = 0.0
    b = np.zeros(p)
    XtX = X.T @ X
    Xty = X.T @ y
    for _ in range(max_iter):
        grad = -2.0 / n * (Xty - XtX @ b)
        z = b - step * grad
        nb = np.sign(z) * np.maximum(np.abs(z) - thr, 0.0)
        if np.max(np.abs(nb - b)) <= tol * (1.0 + np.max(np.abs(nb))):
            b = nb
            break
        b = nb
    return b


def random_lasso_instance(rng, n=40, p_max=8):
    p = int(rng.integers(2, p_max + 1))
    X = rng.standard_normal((n, p)) @ np.linalg.cholesky(0.3 ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))).T
    with_intercept = bool(rng.integers(0, 2))
    if with_intercept:
        X[:, 0] = 1.0
    beta = rng.standard_normal(p) * (rng.random(p) < 0.5)
    y = X @ beta + rng.standard_normal(n)
    psi = rng.uniform(0.5, 2.0, p)
    unpen = (0,) if with_intercept else ()
    pen = np.ones(p, dtype=bool)
    pen[list(unpen)] = False
    lam_max = np.max(np.abs(2 * X[:, pen].T @ (y - y.mean() * with_intercept)) / psi[pen])
    lam = lam_max * rng.uniform(0.05, 0.6)
    return X, y, lam, psi, unpen


def kkt_suite(instances=50, seed=0, kkt_tol=1e-7):
    rng = np.random.default_rng(seed)
    worst_gap = worst_kkt = 0.0
    for _ in range(instances):
        X, y, lam, psi, unpen = random_lasso_instance(rng)
        cfg = LassoConfig(unpenalized=unpen, kkt_tol=kkt_tol)
        fit = lasso_fit(X, y, lam, psi, cfg)
        pen = np.ones(X.shape[1], dtype=bool)
        pen[list(unpen)] = False
        ref = proximal_gradient_lasso(X, y, lam, psi, unpen)
        gap = abs(fit.objective - lasso_objective(X, y, ref, lam, psi, pen))
        worst_gap = max(worst_gap, gap)
        worst_kkt = max(worst_kkt, fit.kkt_residual)
    return [
        CheckResult(f"Lasso objective vs proximal-gradient oracle ({instances} instances)", worst_gap,
                    "<= 1e-8", worst_gap <= 1e-8),
        CheckResult("KKT residual of returned fits", worst_kkt, f"<= {kkt_tol:g}", worst_kkt <= kkt_tol),
    ]


def equivariance_suite(instances=20, seed=1, kkt_tol=1e-12):
    rng = np.random.default_rng(seed)
    worst_fit = worst_coef = 0.0
    same_support = True
    for _ in range(instances):
        X, y, lam, psi, unpen = random_lasso_instance(rng)
        s = rng.uniform(0.2, 5.0, X.shape[1])
        s[list(unpen)] = 1.0
        cfg = LassoConfig(unpenalized=unpen, kkt_tol=kkt_tol)
        a = lasso_fit(X, y, lam, psi, cfg)
        b = lasso_fit(X * s, y, lam, psi * s, cfg)
        worst_fit = max(worst_fit, float(np.max(np.abs(X @ a.coefficients - (X * s) @ b.coefficients))))
        worst_coef = max(worst_coef, float(np.max(np.abs(a.coefficients / s - b.coefficients))))
        same_support &= np.array_equal(a.support, b.support)
    return [
        CheckResult(f"rescaling: fitted values ({instances} instances)", worst_fit, "<= 1e-8", worst_fit <= 1e-8),
        CheckResult("rescaling: coefficients scale by 1/s", worst_coef, "<= 1e-8", worst_coef <= 1e-8),
        CheckResult("rescaling: identical supports", float(same_support), "== 1", bool(same_support)),
    ]


def ortho_suite(geometries=100, seed=2, p_x=200, p_z=150):
    params = make_params(200, p_x, p_z, 0.0)
    moment = population_iv_moment(population_covariance(params), p_x, p_z)
    eta0 = np.concatenate(true_nuisance(params))
    deriv = orthogonality_check(moment, np.array([params.alpha0]), eta0, h=1e-5)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(geometries):
        d = int(rng.integers(1, 3))
        p0 = int(rng.integers(1, 4))
        k = d + p0 + int(rng.integers(0, 4))
        A = rng.standard_normal((k, k))
        g = GmmGeometry(rng.standard_normal((k, d)), rng.standard_normal((k, p0)), A @ A.T + np.eye(k))
        worst = max(worst, float(np.max(np.abs(gmm_mu0(g) @ g.G_beta))))
    return [
        CheckResult("population IV moment: max |dM/d eta| at the truth", deriv, "<= 1e-6", deriv <= 1e-6),
        CheckResult(f"GMM orthogonalizer annihilates G_beta ({geometries} geometries)", worst, "<= 1e-10",
                    worst <= 1e-10),
    ]


def null_suite(reps=1000, seed=0, workers=1):
    sim = SimulationConfig(reps=reps, seed=seed, methods=("double-selection",), workers=workers)
    rows = run_simulation(sim)
    summ = aggregate(rows, sim.alpha0).get("double-selection")
    crit = chi_square_quantile(0.95, 1)
    cal = np.array([r.calpha for r in rows if r.converged])
    rate = float(np.mean(cal > crit))
    return [CheckResult(f"C(alpha0) rejection rate at 5% ({summ.n_converged} replications)", rate,
                        "in [0.03, 0.08]", 0.03 <= rate <= 0.08)]


SUITES = {
    "kkt": lambda: kkt_suite() + equivariance_suite(),
    "ortho": ortho_suite,
    "null": null_suite,
}
