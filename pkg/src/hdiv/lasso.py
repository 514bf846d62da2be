"""Lasso with covariate-specific penalty loadings, and Post-Lasso refits.

The objective minimized by :func:`lasso_fit` is::

    (1/n) * sum_i (y_i - x_i' b)^2 + (lam/n) * sum_j psi_j |b_j|

with the sum over penalized columns only. Columns are never standardized; the
loadings carry the scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError, RankDeficiencyError
from .numkit import as_matrix, as_vector, normal_quantile, ols


@dataclass(frozen=True)
class LassoConfig:
    c: float = 1.1
    gamma: float = 0.1
    max_sweeps: int = 10_000
    kkt_tol: float = 1e-7
    loading_iterations: int = 2
    unpenalized: tuple = ()

    def __post_init__(self):
        if not self.c > 1:
            raise ConfigError(f"penalty constant c must exceed 1, got {self.c}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.kkt_tol > 0:
            raise ConfigError("kkt_tol must be positive")
        if self.loading_iterations < 1:
            raise ConfigError("loading_iterations must be at least 1")
        if self.max_sweeps < 1:
            raise ConfigError("max_sweeps must be at least 1")
        object.__setattr__(self, "unpenalized", tuple(sorted(set(int(j) for j in self.unpenalized))))

    def replace(self, **changes):
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return LassoConfig(**kw)


@dataclass(frozen=True)
class LassoFit:
    coefficients: np.ndarray
    support: np.ndarray
    lam: float
    loadings: np.ndarray
    sweeps_used: int
    objective: float
    converged: bool
    kkt_residual: float
    objective_trace: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PostLassoFit:
    coefficients: np.ndarray
    support: np.ndarray
    loss: float


@dataclass(frozen=True)
class FeasibleLassoResult:
    fit: LassoFit
    refit: PostLassoFit
    loadings_history: list


def penalty_level(n, p, cfg=None):
    """Data-free penalty ``2 c sqrt(n) Phi^{-1}(1 - gamma / (2 p ln n))``."""
    cfg = cfg or LassoConfig()
    if n < 2 or p < 1:
        raise ConfigError(f"penalty level needs n >= 2 and p >= 1 (got n={n}, p={p})")
    q = 1.0 - cfg.gamma / (2.0 * p * math.log(n))
    if not 0.0 < q < 1.0:
        raise ConfigError(f"penalty quantile argument {q} is outside (0, 1); check gamma and p")
    return 2.0 * cfg.c * math.sqrt(n) * normal_quantile(q)


def soft_threshold(z, t):
    if t < 0:
        raise ConfigError("threshold must be non-negative")
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@numba.njit(cache=True)
def _kkt(X, r, beta, weights, penalized):
    n, p = X.shape
    g = -2.0 / n * (X.T @ r)
    worst = 0.0
    for j in range(p):
        if penalized[j]:
            if beta[j] == 0.0:
                v = abs(g[j]) - weights[j]
                if v < 0.0:
                    v = 0.0
            elif beta[j] > 0.0:
                v = abs(g[j] + weights[j])
            else:
                v = abs(g[j] - weights[j])
        else:
            v = abs(g[j])
        if v > worst:
            worst = v
    return worst


@numba.njit(cache=True)
def _coordinate_descent(X, y, weights, penalized, beta, max_sweeps, kkt_tol):
    n, p = X.shape
    colsq = np.empty(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += X[i, j] * X[i, j]
        colsq[j] = s / n
    r = y - X @ beta
    trace = np.empty(max_sweeps + 1)
    pen = 0.0
    for j in range(p):
        if penalized[j]:
            pen += weights[j] * abs(beta[j])
    trace[0] = (r @ r) / n + pen
    kkt = _kkt(X, r, beta, weights, penalized)
    sweeps = 0
    while kkt > kkt_tol and sweeps < max_sweeps:
        for j in range(p):
            a = colsq[j]
            if a == 0.0:
                beta[j] = 0.0
                continue
            old = beta[j]
            rho = 0.0
            for i in range(n):
                rho += X[i, j] * r[i]
            rho = rho / n + a * old
            if penalized[j]:
                t = 0.5 * weights[j]
                if rho > t:
                    new = (rho - t) / a
                elif rho < -t:
                    new = (rho + t) / a
                else:
                    new = 0.0
            else:
                new = rho / a
            if new != old:
                diff = new - old
                for i in range(n):
                    r[i] -= X[i, j] * diff
                beta[j] = new
        sweeps += 1
        pen = 0.0
        for j in range(p):
            if penalized[j]:
                pen += weights[j] * abs(beta[j])
        trace[sweeps] = (r @ r) / n + pen
        kkt = _kkt(X, r, beta, weights, penalized)
    return beta, sweeps, kkt, trace[: sweeps + 1]


def _penalized_mask(p, cfg):
    mask = np.ones(p, dtype=np.bool_)
    for j in cfg.unpenalized:
        if j < p:
            mask[j] = False
    return mask


def lasso_objective(X, y, beta, lam, loadings, penalized):
    n = X.shape[0]
    r = y - X @ beta
    return float(r @ r) / n + lam / n * float(np.sum(np.abs(loadings[penalized] * beta[penalized])))


def lasso_fit(X, y, lam, loadings, cfg=None, warm_start=None):
    """Weighted Lasso by cyclic coordinate descent.

    Stops once the KKT residual drops to ``cfg.kkt_tol``; a fit that runs out
    of sweeps comes back with ``converged=False``.
    """
    cfg = cfg or LassoConfig()
    X = as_matrix(X)
    y = as_vector(y)
    n, p = X.shape
    if y.shape[0] != n:
        raise ConfigError(f"X has {n} rows but y has {y.shape[0]}")
    if not (np.isfinite(lam) and lam >= 0):
        raise ConfigError(f"penalty level must be finite and non-negative, got {lam}")
    psi = as_vector(loadings, "loadings")
    if psi.shape[0] != p:
        raise ConfigError(f"expected {p} loadings, got {psi.shape[0]}")
    penalized = _penalized_mask(p, cfg)
    if np.any(psi[penalized] <= 0):
        bad = np.flatnonzero(penalized & (psi <= 0)).tolist()
        raise ConfigError(f"penalized columns {bad} have non-positive loadings")
    weights = lam / n * psi
    weights[~penalized] = 0.0
    beta0 = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=float)
    beta, sweeps, kkt, trace = _coordinate_descent(
        np.asfortranarray(X), y, weights, penalized, beta0, cfg.max_sweeps, cfg.kkt_tol
    )
    return LassoFit(
        coefficients=beta,
        support=np.flatnonzero(beta),
        lam=float(lam),
        loadings=psi,
        sweeps_used=int(sweeps),
        objective=float(trace[-1]),
        converged=bool(kkt <= cfg.kkt_tol),
        kkt_residual=float(kkt),
        objective_trace=trace,
    )


def post_lasso(X, y, fit, forced=()):
    """OLS refit on the Lasso support plus ``forced`` columns."""
    X = as_matrix(X)
    y = as_vector(y)
    support = np.union1d(np.asarray(fit.support, dtype=int), np.asarray(list(forced), dtype=int)).astype(int)
    try:
        coef = ols(X, y, support)
    except RankDeficiencyError as exc:
        raise RankDeficiencyError(
            f"Post-Lasso design on support {support.tolist()} is rank deficient",
            support_size=support.size,
        ) from exc
    r = y - X @ coef
    return PostLassoFit(coefficients=coef, support=support, loss=float(r @ r) / X.shape[0])


def _loadings(X, resid):
    psi = np.sqrt(np.mean(X**2 * (resid**2)[:, None], axis=0))
    zero_col = ~np.any(X != 0, axis=0)
    psi[zero_col] = 1.0
    floor = 1e-12 * max(1.0, float(psi.max()))
    return np.maximum(psi, floor)


def feasible_lasso(X, y, cfg=None):
    """Lasso and Post-Lasso with iteratively estimated penalty loadings.

    Loadings start from ``sqrt(mean(x_j^2 (y - ybar)^2))``; each of the
    ``cfg.loading_iterations`` rounds fits Lasso, refits Post-Lasso (with the
    unpenalized columns forced in) and re-estimates the loadings from the
    Post-Lasso residuals.
    """
    cfg = cfg or LassoConfig()
    X = as_matrix(X)
    y = as_vector(y)
    n, p = X.shape
    if n < 5:
        raise ConfigError(f"feasible Lasso needs at least 5 observations, got {n}")
    penalized = _penalized_mask(p, cfg)
    n_pen = int(penalized.sum())
    forced = [j for j in cfg.unpenalized if j < p]
    lam = penalty_level(n, max(n_pen, 1), cfg)
    psi = _loadings(X, y - y.mean())
    history = [psi]
    fit = refit = None
    warm = None
    for _ in range(cfg.loading_iterations):
        fit = lasso_fit(X, y, lam, psi, cfg, warm_start=warm)
        refit = post_lasso(X, y, fit, forced)
        psi = _loadings(X, y - X @ refit.coefficients)
        history.append(psi)
        warm = fit.coefficients
    return FeasibleLassoResult(fit=fit, refit=refit, loadings_history=history)
