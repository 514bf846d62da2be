"""Dense linear algebra and distribution helpers.

Least-squares solves go through QR with column pivoting; a diagonal entry of
``R`` below ``RANK_TOL`` times the largest one flags rank deficiency. The
normal quantile is computed natively (stdlib only) so results do not depend on
the special-function library that happens to be installed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .errors import ConfigError, RankDeficiencyError

RANK_TOL = 1e-10

_STD_NORMAL = NormalDist()
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def as_matrix(a, name="X"):
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite entries")
    # fixed layout keeps BLAS results independent of how the caller sliced the data
    return np.ascontiguousarray(arr)


def as_vector(a, name="y"):
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ConfigError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def pivoted_qr(A):
    """Economic QR with column pivoting; raises if ``A`` is rank deficient.

    Returns ``(Q, R, perm)`` with ``A[:, perm] = Q @ R``.
    """
    n, k = A.shape
    if k == 0:
        return np.zeros((n, 0)), np.zeros((0, 0)), np.zeros(0, dtype=int)
    if k > n:
        raise RankDeficiencyError(
            f"design with {k} columns and only {n} rows is rank deficient", support_size=k
        )
    Q, R, perm = sla.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[0] == 0.0 or diag[-1] < RANK_TOL * diag[0]:
        raise RankDeficiencyError(
            f"rank-deficient design on a support of size {k} "
            f"(smallest pivot ratio {diag[-1] / max(diag[0], 1e-300):.3g})",
            support_size=k,
        )
    return Q, R, perm


def ols(X, y, support=None):
    """Least-squares coefficients restricted to ``support`` (all columns if None).

    Coefficients outside the support are exactly zero.
    """
    X = as_matrix(X)
    y = as_vector(y)
    if X.shape[0] != y.shape[0]:
        raise ConfigError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    p = X.shape[1]
    idx = np.arange(p) if support is None else np.asarray(sorted(set(int(j) for j in support)), dtype=int)
    beta = np.zeros(p)
    if idx.size == 0:
        return beta
    Q, R, perm = pivoted_qr(X[:, idx])
    coef = sla.solve_triangular(R, Q.T @ y)
    beta[idx[perm]] = coef
    return beta


def _project(Q, A):
    return Q @ (Q.T @ A)


@dataclass(frozen=True)
class TslsResult:
    alpha: np.ndarray
    se_homoscedastic: np.ndarray
    se_robust: np.ndarray
    coef: np.ndarray
    residuals: np.ndarray


def tsls(y, D, instruments, controls=None):
    """Two-stage least squares of ``y`` on ``D`` with exogenous ``controls``.

    Returns the endogenous coefficients together with homoscedastic
    (``sigma^2 (W'W)^-1``, ``sigma^2`` = mean squared residual) and HC0 sandwich
    standard errors, where ``W`` holds the first-stage fitted regressors.
    """
    y = as_vector(y)
    D = as_matrix(D, "D")
    n = y.shape[0]
    Zi = as_matrix(instruments, "instruments") if instruments is not None else np.zeros((n, 0))
    C = as_matrix(controls, "controls") if controls is not None else np.zeros((n, 0))
    if not (D.shape[0] == Zi.shape[0] == C.shape[0] == n):
        raise ConfigError("y, D, instruments and controls must have the same number of rows")
    pd_ = D.shape[1]
    if Zi.shape[1] < pd_:
        raise ConfigError(
            f"{Zi.shape[1]} instruments for {pd_} endogenous variables; need at least as many"
        )
    exog = np.hstack([Zi, C])
    Qz, _, _ = pivoted_qr(exog)
    regressors = np.hstack([D, C])
    W = _project(Qz, regressors)
    Qw, Rw, perm = pivoted_qr(W)
    coef = np.empty(regressors.shape[1])
    coef[perm] = sla.solve_triangular(Rw, Qw.T @ y)
    resid = y - regressors @ coef
    # (W'W)^-1 via the triangular factor of the pivoted QR
    Rinv = sla.solve_triangular(Rw, np.eye(Rw.shape[0]))
    WtW_inv_p = Rinv @ Rinv.T
    WtW_inv = np.empty_like(WtW_inv_p)
    WtW_inv[np.ix_(perm, perm)] = WtW_inv_p
    sigma2 = float(resid @ resid) / n
    cov_h = sigma2 * WtW_inv
    meat = (W * resid[:, None] ** 2).T @ W
    cov_r = WtW_inv @ meat @ WtW_inv
    return TslsResult(
        alpha=coef[:pd_],
        se_homoscedastic=np.sqrt(np.diag(cov_h)[:pd_]),
        se_robust=np.sqrt(np.diag(cov_r)[:pd_]),
        coef=coef,
        residuals=resid,
    )


def normal_cdf(z):
    return 0.5 * math.erfc(-z / _SQRT2)


def normal_quantile(p):
    """Inverse standard normal CDF.

    Starts from the stdlib rational approximation and applies one Newton step
    against ``math.erfc``; the upper tail is refined on the complementary
    probability so accuracy holds near 1.
    """
    p = float(p)
    if not (0.0 < p < 1.0):
        raise ConfigError(f"probability must lie in (0, 1), got {p!r}")
    x = _STD_NORMAL.inv_cdf(p)
    dens = math.exp(-0.5 * x * x) / _SQRT2PI
    if dens == 0.0:
        return x
    if x > 0:
        # residual on the upper tail: (1 - Phi(x)) - (1 - p)
        resid = 0.5 * math.erfc(x / _SQRT2) - (1.0 - p)
        return x + resid / dens
    resid = normal_cdf(x) - p
    return x - resid / dens


def chi_square_quantile(p, k):
    """Inverse chi-square CDF with ``k`` degrees of freedom."""
    p = float(p)
    if not (0.0 < p < 1.0):
        raise ConfigError(f"probability must lie in (0, 1), got {p!r}")
    if int(k) != k or k < 1:
        raise ConfigError(f"degrees of freedom must be a positive integer, got {k!r}")
    return float(stats.chi2.ppf(p, int(k)))


def sym_inv_sqrt(S, floor_rel=1e-12):
    """Inverse symmetric square root via eigendecomposition.

    Eigenvalues are floored at ``floor_rel * trace``; a matrix whose largest
    eigenvalue is below that floor is treated as singular.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    floor = floor_rel * float(np.trace(S))
    if floor <= 0.0 or w.min() <= floor:
        raise np.linalg.LinAlgError(
            f"matrix is numerically singular (min eigenvalue {w.min():.3g}, floor {floor:.3g})"
        )
    return (V / np.sqrt(w)) @ V.T
