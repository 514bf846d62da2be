"""Orthogonal-moment inference for the linear IV model with many controls/instruments.

For each endogenous variable ``k`` the per-observation moment is::

    psi_k = (y - x'theta - sum_kb (d_kb - x'vartheta_kb) alpha_kb)
            * (x'gamma_k + z'delta_k - x'vartheta_k)

which is affine in ``alpha``: ``mean(psi) = Gamma1 @ alpha + Gamma2``. The
nuisance ``eta = (theta, vartheta_k, gamma_k, delta_k)`` is estimated by three
rounds of (Post-)Lasso, see :func:`estimate_nuisance`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, EstimationError, HdivError, WeakIdentificationError
from .lasso import LassoConfig, feasible_lasso
from .numkit import as_matrix, as_vector, chi_square_quantile, normal_quantile, sym_inv_sqrt, tsls

WEAK_ID_TOL = 1e-12


@dataclass(frozen=True)
class Dataset:
    """Observed sample. ``X`` holds the controls, including an intercept
    column at index ``intercept`` (None if there is none)."""

    y: np.ndarray
    D: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    intercept: Optional[int] = 0

    def __post_init__(self):
        y = as_vector(self.y, "y")
        n = y.shape[0]
        D = as_matrix(self.D, "D")
        X = as_matrix(self.X, "X") if np.size(self.X) else np.zeros((n, 0))
        Z = as_matrix(self.Z, "Z") if np.size(self.Z) else np.zeros((n, 0))
        for name, a in (("D", D), ("X", X), ("Z", Z)):
            if a.shape[0] != n:
                raise ConfigError(f"{name} has {a.shape[0]} rows but y has {n}")
        if D.shape[1] < 1:
            raise ConfigError("need at least one endogenous variable")
        if self.intercept is not None and not 0 <= self.intercept < X.shape[1]:
            raise ConfigError(f"intercept index {self.intercept} is not a column of X")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p_d(self):
        return self.D.shape[1]

    @property
    def p_x(self):
        return self.X.shape[1]

    @property
    def p_z(self):
        return self.Z.shape[1]

    def forced_controls(self):
        return () if self.intercept is None else (self.intercept,)


@dataclass(frozen=True)
class RegressionStep:
    """Outcome of one nuisance regression."""

    coefficients: np.ndarray
    support: np.ndarray
    converged: bool = True
    selected: Optional[np.ndarray] = None  # Lasso (pre-refit) support, when applicable


@dataclass(frozen=True)
class NuisanceEstimate:
    theta: np.ndarray  # (p_x,)
    vartheta: np.ndarray  # (p_x, p_d)
    gamma: np.ndarray  # (p_x, p_d)
    delta: np.ndarray  # (p_z, p_d)
    steps: dict = field(default_factory=dict, repr=False)

    @property
    def converged(self):
        return all(s.converged for s in self.steps.values())

    @classmethod
    def from_arrays(cls, theta, vartheta, gamma, delta):
        def col(a):
            a = np.asarray(a, dtype=float)
            return a[:, None] if a.ndim == 1 else a

        return cls(theta=np.asarray(theta, dtype=float), vartheta=col(vartheta), gamma=col(gamma), delta=col(delta))


@dataclass(frozen=True)
class InferenceResult:
    alpha: np.ndarray
    se_robust: np.ndarray
    se_homoscedastic_iv: np.ndarray
    wald_ci: np.ndarray  # (p_d, 2)
    level: float
    gamma1: Optional[np.ndarray] = None
    omega: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    calpha_at_alpha0: Optional[float] = None
    inversion_grid: Optional[np.ndarray] = None
    inversion_accept: Optional[np.ndarray] = None
    method: str = "double-selection"
    converged: bool = True

    @property
    def inversion_interval(self):
        """(min, max) of accepted grid points for a scalar target, else None."""
        if self.inversion_accept is None or self.alpha.shape[0] != 1:
            return None
        pts = np.asarray(self.inversion_grid)[np.asarray(self.inversion_accept)]
        if pts.size == 0:
            return (np.nan, np.nan)
        return (float(pts.min()), float(pts.max()))


def lasso_step(mode="post-lasso"):
    """Nuisance regression by feasible Lasso; returns a fitter for :func:`estimate_nuisance`."""
    if mode not in ("lasso", "post-lasso"):
        raise ConfigError(f"mode must be 'lasso' or 'post-lasso', got {mode!r}")

    def fit(F, target, cfg, forced):
        res = feasible_lasso(F, target, cfg.replace(unpenalized=forced))
        if mode == "post-lasso":
            coef, support = res.refit.coefficients, res.refit.support
        else:
            coef, support = res.fit.coefficients, res.fit.support
        return RegressionStep(coefficients=coef, support=support, converged=res.fit.converged,
                              selected=res.fit.support)

    return fit


def estimate_nuisance(data: Dataset, cfg: LassoConfig | None = None, mode="post-lasso",
                      fitter: Callable | None = None) -> NuisanceEstimate:
    """Three-step nuisance estimation.

    1. regress each ``d_k`` on ``(x, z)`` -> ``gamma_k, delta_k``
    2. regress ``y`` on ``x`` -> ``theta``
    3. regress the fitted ``x'gamma_k + z'delta_k`` on ``x`` -> ``vartheta_k``

    ``fitter(F, target, cfg, forced) -> RegressionStep`` replaces the
    (Post-)Lasso regressions when given.
    """
    cfg = cfg or LassoConfig()
    fitter = fitter or lasso_step(mode)
    X, Z = data.X, data.Z
    px = data.p_x
    F = np.hstack([X, Z])
    forced = data.forced_controls()
    gamma = np.zeros((px, data.p_d))
    delta = np.zeros((data.p_z, data.p_d))
    vartheta = np.zeros((px, data.p_d))
    steps = {}

    def run(step, k, A, target):
        try:
            return fitter(A, target, cfg, forced)
        except HdivError as exc:
            where = f"step {step}" + ("" if k is None else f", endogenous variable {k}")
            raise EstimationError(f"nuisance regression failed at {where}: {exc}", step=step, k=k) from exc

    for k in range(data.p_d):
        s1 = run(1, k, F, data.D[:, k])
        steps[(1, k)] = s1
        gamma[:, k] = s1.coefficients[:px]
        delta[:, k] = s1.coefficients[px:]
    s2 = run(2, None, X, data.y)
    steps[(2, None)] = s2
    theta = s2.coefficients
    for k in range(data.p_d):
        d_hat = X @ gamma[:, k] + Z @ delta[:, k]
        s3 = run(3, k, X, d_hat)
        steps[(3, k)] = s3
        vartheta[:, k] = s3.coefficients
    return NuisanceEstimate(theta=theta, vartheta=vartheta, gamma=gamma, delta=delta, steps=steps)


def _check_eta(data, eta):
    if eta.theta.shape != (data.p_x,):
        raise ConfigError(f"theta has shape {eta.theta.shape}, expected ({data.p_x},)")
    for name, a, rows in (("vartheta", eta.vartheta, data.p_x), ("gamma", eta.gamma, data.p_x),
                          ("delta", eta.delta, data.p_z)):
        if a.shape != (rows, data.p_d):
            raise ConfigError(f"{name} has shape {a.shape}, expected ({rows}, {data.p_d})")


def residual_parts(data, eta):
    """Outcome residual, endogenous residuals and the orthogonalized instrument."""
    _check_eta(data, eta)
    rho_y = data.y - data.X @ eta.theta
    rho_d = data.D - data.X @ eta.vartheta
    v = data.X @ eta.gamma + data.Z @ eta.delta - data.X @ eta.vartheta
    return rho_y, rho_d, v


def _alpha_vec(alpha, p_d):
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    if a.shape != (p_d,):
        raise ConfigError(f"alpha has shape {a.shape}, expected ({p_d},)")
    return a


def moment_psi(data, alpha, eta):
    """Per-observation moment values, shape ``(n, p_d)``."""
    alpha = _alpha_vec(alpha, data.p_d)
    rho_y, rho_d, v = residual_parts(data, eta)
    return (rho_y - rho_d @ alpha)[:, None] * v


def gamma_matrices(data, eta):
    """``(Gamma1, Gamma2)`` with ``mean(psi(alpha)) = Gamma1 @ alpha + Gamma2``."""
    rho_y, rho_d, v = residual_parts(data, eta)
    n = data.n
    gamma1 = -(v.T @ rho_d) / n
    gamma2 = (v.T @ rho_y) / n
    return gamma1, gamma2


def omega_hat(data, alpha, eta):
    psi = moment_psi(data, alpha, eta)
    om = psi.T @ psi / data.n
    return 0.5 * (om + om.T)


def _score_from_parts(rho_y, rho_d, v, alpha):
    n = rho_y.shape[0]
    resid = rho_y - rho_d @ alpha
    psi = resid[:, None] * v
    # Residual identically zero up to rounding: the sample equation holds
    # exactly, and studentizing would only amplify rounding noise.
    scale = float(np.max(np.abs(rho_y) + np.abs(rho_d) @ np.abs(alpha), initial=0.0))
    if np.max(np.abs(resid), initial=0.0) <= 1e-12 * scale:
        return np.zeros(v.shape[1])
    m = psi.mean(axis=0)
    om = psi.T @ psi / n
    try:
        root = sym_inv_sqrt(om)
    except np.linalg.LinAlgError as exc:
        raise WeakIdentificationError(f"moment variance is singular: {exc}") from exc
    return root @ (np.sqrt(n) * m)


def score_statistic(data, alpha, eta):
    """``Omega(alpha)^{-1/2} sqrt(n) Mhat(alpha)``."""
    alpha = _alpha_vec(alpha, data.p_d)
    return _score_from_parts(*residual_parts(data, eta), alpha)


def c_alpha_statistic(data, alpha, eta):
    s = score_statistic(data, alpha, eta)
    return float(s @ s)


def _gram_solve(gamma1, rhs):
    G = gamma1.T @ gamma1
    w = np.linalg.eigvalsh(G)
    scale = max(float(np.abs(gamma1).max()) ** 2, 1e-300)
    if w.min() <= WEAK_ID_TOL * scale or w.min() <= 0.0:
        raise WeakIdentificationError(
            f"Gamma1'Gamma1 is singular (min eigenvalue {w.min():.3g}); the instruments carry no signal"
        )
    return np.linalg.solve(G, gamma1.T @ rhs)


def estimate_alpha(data, eta):
    """Closed-form minimizer of ``|Mhat(alpha)|``: ``-(G1'G1)^-1 G1'G2``."""
    gamma1, gamma2 = gamma_matrices(data, eta)
    return -_gram_solve(gamma1, gamma2)


def estimate_alpha_from_gammas(gamma1, gamma2):
    return -_gram_solve(np.atleast_2d(gamma1), np.atleast_1d(gamma2))


def one_step_estimate(data, alpha_start, eta):
    alpha_start = _alpha_vec(alpha_start, data.p_d)
    gamma1, gamma2 = gamma_matrices(data, eta)
    m = gamma1 @ alpha_start + gamma2
    return alpha_start - _gram_solve(gamma1, m)


@dataclass(frozen=True)
class VarianceEstimate:
    V: np.ndarray
    se: np.ndarray


def sandwich(gamma1, omega, n):
    gamma1 = np.atleast_2d(gamma1)
    if not np.any(gamma1) or np.linalg.cond(gamma1) > 1.0 / WEAK_ID_TOL:
        raise WeakIdentificationError("Gamma1 is singular")
    g_inv = np.linalg.inv(gamma1)
    V = g_inv.T @ np.atleast_2d(omega) @ g_inv
    V = 0.5 * (V + V.T)
    return VarianceEstimate(V=V, se=np.sqrt(np.clip(np.diag(V), 0.0, None) / n))


def variance_estimate(data, alpha_hat, eta):
    """``V = (G1')^-1 Omega(alpha_hat) G1^-1`` and ``se = sqrt(diag(V)/n)``."""
    gamma1, _ = gamma_matrices(data, eta)
    return sandwich(gamma1, omega_hat(data, alpha_hat, eta), data.n)


def homoscedastic_iv_se(data, eta):
    """Conventional IV standard error from the final IV step: 2SLS of the
    outcome residual on the endogenous residuals, instrumented by the
    orthogonalized instrument."""
    rho_y, rho_d, v = residual_parts(data, eta)
    return tsls(rho_y, rho_d, v, None).se_homoscedastic


def default_grid(alpha_hat, se, points=401, width=6.0):
    alpha_hat = np.atleast_1d(alpha_hat)
    se = np.atleast_1d(se)
    if alpha_hat.shape[0] == 1:
        return np.linspace(alpha_hat[0] - width * se[0], alpha_hat[0] + width * se[0], points)[:, None]
    axes = [np.linspace(a - width * s, a + width * s, 41) for a, s in zip(alpha_hat, se)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def c_alpha_path(data, eta, grid):
    """C(alpha) at every row of ``grid`` (shape ``(m, p_d)``)."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    parts = residual_parts(data, eta)
    out = np.empty(grid.shape[0])
    for i, a in enumerate(grid):
        try:
            s = _score_from_parts(*parts, a)
        except WeakIdentificationError:
            out[i] = np.inf
            continue
        out[i] = float(s @ s)
    return out


@dataclass(frozen=True)
class ConfidenceSets:
    wald: np.ndarray  # (p_d, 2)
    grid: np.ndarray
    accept: np.ndarray
    critical_value: float


def confidence_sets(data, eta, level=0.95, grid=None):
    """Wald intervals from the sandwich SE and the C(alpha) inversion set."""
    if not 0 < level < 1:
        raise ConfigError(f"level must lie in (0, 1), got {level}")
    alpha_hat = estimate_alpha(data, eta)
    var = variance_estimate(data, alpha_hat, eta)
    z = normal_quantile(1 - (1 - level) / 2)
    wald = np.column_stack([alpha_hat - z * var.se, alpha_hat + z * var.se])
    if grid is None:
        grid = default_grid(alpha_hat, var.se)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[0] == 0:
        raise ConfigError("inversion grid is empty")
    crit = chi_square_quantile(level, data.p_d)
    stats_ = c_alpha_path(data, eta, grid)
    return ConfidenceSets(wald=wald, grid=grid, accept=stats_ <= crit, critical_value=crit)


def infer(data, cfg=None, mode="post-lasso", level=0.95, alpha0=None, grid=None, eta=None, inversion=True):
    """Full pipeline: nuisance estimation, point estimate, SEs, Wald and inversion sets."""
    eta = eta if eta is not None else estimate_nuisance(data, cfg, mode)
    gamma1, gamma2 = gamma_matrices(data, eta)
    alpha_hat = estimate_alpha_from_gammas(gamma1, gamma2)
    omega = omega_hat(data, alpha_hat, eta)
    var = sandwich(gamma1, omega, data.n)
    se_h = homoscedastic_iv_se(data, eta)
    z = normal_quantile(1 - (1 - level) / 2)
    wald = np.column_stack([alpha_hat - z * var.se, alpha_hat + z * var.se])
    grid_pts = accept = None
    if inversion:
        sets = confidence_sets(data, eta, level, grid)
        grid_pts, accept = sets.grid, sets.accept
    c0 = None
    if alpha0 is not None:
        try:
            c0 = c_alpha_statistic(data, _alpha_vec(alpha0, data.p_d), eta)
        except WeakIdentificationError:
            c0 = float("inf")
    return InferenceResult(
        alpha=alpha_hat, se_robust=var.se, se_homoscedastic_iv=se_h, wald_ci=wald, level=level,
        gamma1=gamma1, omega=omega, V=var.V, calpha_at_alpha0=c0,
        inversion_grid=grid_pts, inversion_accept=accept, converged=eta.converged,
    )
