"""Neyman orthogonalization for likelihood and GMM moment functions.

Also provides :func:`orthogonality_check`, a central-difference estimate of
``max |d M / d eta|`` at a point, and the population version of the linear IV
moment used to check orthogonality of the IV system analytically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, WeakIdentificationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionedJacobian:
    J_aa: np.ndarray
    J_ab: np.ndarray
    J_ba: np.ndarray
    J_bb: np.ndarray

    def __post_init__(self):
        aa, ab, ba, bb = (np.atleast_2d(np.asarray(m, dtype=float)) for m in
                          (self.J_aa, self.J_ab, self.J_ba, self.J_bb))
        d, p0 = ab.shape
        if aa.shape != (d, d) or ba.shape != (p0, d) or bb.shape != (p0, p0):
            raise ConfigError(
                f"inconsistent blocks: J_aa {aa.shape}, J_ab {ab.shape}, J_ba {ba.shape}, J_bb {bb.shape}"
            )
        for name, m in (("J_aa", aa), ("J_ab", ab), ("J_ba", ba), ("J_bb", bb)):
            object.__setattr__(self, name, m)

    @classmethod
    def from_matrix(cls, J, d):
        J = np.asarray(J, dtype=float)
        return cls(J[:d, :d], J[:d, d:], J[d:, :d], J[d:, d:])

    @classmethod
    def outer_product(cls, score_alpha, score_beta):
        """Empirical information matrix ``mean(s s')`` from per-observation scores."""
        sa = np.asarray(score_alpha, dtype=float)
        sb = np.asarray(score_beta, dtype=float)
        sa = sa[:, None] if sa.ndim == 1 else sa
        sb = sb[:, None] if sb.ndim == 1 else sb
        n = sa.shape[0]
        return cls(sa.T @ sa / n, sa.T @ sb / n, sb.T @ sa / n, sb.T @ sb / n)


@dataclass(frozen=True)
class GmmGeometry:
    G_alpha: np.ndarray
    G_beta: np.ndarray
    Omega_m: np.ndarray

    def __post_init__(self):
        Ga = np.asarray(self.G_alpha, dtype=float)
        Ga = Ga[:, None] if Ga.ndim == 1 else Ga
        k = Ga.shape[0]
        Gb = np.asarray(self.G_beta, dtype=float).reshape(k, -1) if np.size(self.G_beta) else np.zeros((k, 0))
        Om = np.atleast_2d(np.asarray(self.Omega_m, dtype=float))
        if Om.shape != (k, k):
            raise ConfigError(f"Omega_m has shape {Om.shape}, expected ({k}, {k})")
        if k < Ga.shape[1] + Gb.shape[1]:
            raise ConfigError(f"need at least d + p0 = {Ga.shape[1] + Gb.shape[1]} moments, got {k}")
        if not np.allclose(Om, Om.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Om).max())):
            raise ConfigError("Omega_m must be symmetric")
        object.__setattr__(self, "G_alpha", Ga)
        object.__setattr__(self, "G_beta", Gb)
        object.__setattr__(self, "Omega_m", Om)


def _solve_right(A, B, what):
    """``A @ inv(B)`` for symmetric positive definite ``B``.

    Symmetric blocks go through Cholesky; anything else (or a Cholesky
    failure) falls back to pivoted QR.
    """
    if np.allclose(B, B.T, rtol=1e-12, atol=0.0):
        try:
            c = sla.cho_factor(B)
            return sla.cho_solve(c, A.T).T
        except np.linalg.LinAlgError:
            log.info("%s is not positive definite; falling back to pivoted QR", what)
    Q, R, perm = sla.qr(B, pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0 or diag[-1] < 1e-12 * diag[0]:
        raise WeakIdentificationError(f"{what} is singular")
    # B P = Q R  =>  inv(B) = P inv(R) Q'
    Rinv_Qt = sla.solve_triangular(R, Q.T)
    Binv = np.empty_like(Rinv_Qt)
    Binv[perm] = Rinv_Qt
    return A @ Binv


def likelihood_mu0(J):
    """``J_ab @ inv(J_bb)``: orthogonalizes the target score against the nuisance score."""
    if J.J_bb.shape[0] == 0:
        return np.zeros_like(J.J_ab)
    return _solve_right(J.J_ab, J.J_bb, "J_bb")


def projection_mu0star(J0):
    """Projection coefficient of the target score on the nuisance score (outer-product blocks)."""
    if J0.J_bb.shape[0] == 0:
        return np.zeros_like(J0.J_ab)
    return _solve_right(J0.J_ab, J0.J_bb, "J0_bb")


def gmm_mu0(g):
    """Optimal orthogonalizing weight ``G_a' W - G_a' W G_b (G_b' W G_b)^-1 G_b' W`` with ``W = inv(Omega_m)``."""
    Ga, Gb, Om = g.G_alpha, g.G_beta, g.Omega_m
    try:
        c = sla.cho_factor(Om)
    except np.linalg.LinAlgError as exc:
        raise WeakIdentificationError("Omega_m is not positive definite") from exc
    W_Ga = sla.cho_solve(c, Ga)  # inv(Om) G_a
    base = W_Ga.T
    if Gb.shape[1] == 0:
        return base
    W_Gb = sla.cho_solve(c, Gb)
    inner = Gb.T @ W_Gb
    # mu0 = G_a' W - (G_a' W G_b) inv(inner) (G_b' W)
    left = Ga.T @ W_Gb
    return base - _solve_right(left, inner, "G_beta' Omega_m^-1 G_beta") @ W_Gb.T


def orthogonality_check(moment_fn, alpha0, eta0, h=1e-5):
    """Max-norm of the central-difference Jacobian ``d M(alpha0, eta) / d eta`` at ``eta0``.

    Step per coordinate is ``h * max(1, |eta0_j|)``.
    """
    if not h > 0:
        raise ConfigError("step h must be positive")
    eta0 = np.asarray(eta0, dtype=float).ravel()
    worst = 0.0
    for j in range(eta0.size):
        step = h * max(1.0, abs(eta0[j]))
        up = eta0.copy()
        dn = eta0.copy()
        up[j] += step
        dn[j] -= step
        fu = np.atleast_1d(np.asarray(moment_fn(alpha0, up), dtype=float))
        fd = np.atleast_1d(np.asarray(moment_fn(alpha0, dn), dtype=float))
        if not (np.all(np.isfinite(fu)) and np.all(np.isfinite(fd))):
            raise ConfigError(f"moment function is not finite near coordinate {j}")
        worst = max(worst, float(np.max(np.abs(fu - fd))) / (2 * step))
    return worst


def population_iv_moment(cov_w, p_x, p_z):
    """Population linear IV moment as a function ``M(alpha, eta)`` for one endogenous variable.

    ``cov_w`` is the second-moment matrix of ``w = (y, d, x, z)``; ``eta`` is
    the flat vector ``(theta, vartheta, gamma, delta)``.
    """
    cov_w = np.asarray(cov_w, dtype=float)
    m = 2 + p_x + p_z
    if cov_w.shape != (m, m):
        raise ConfigError(f"second-moment matrix has shape {cov_w.shape}, expected ({m}, {m})")

    def moment(alpha, eta):
        a = float(np.atleast_1d(alpha)[0])
        theta = eta[:p_x]
        vartheta = eta[p_x:2 * p_x]
        gamma = eta[2 * p_x:3 * p_x]
        delta = eta[3 * p_x:]
        # residual: y - x'theta - (d - x'vartheta) a ; instrument: x'(gamma - vartheta) + z'delta
        left = np.concatenate([[1.0, -a], -theta + a * vartheta, np.zeros(p_z)])
        right = np.concatenate([[0.0, 0.0], gamma - vartheta, delta])
        return np.array([left @ cov_w @ right])

    return moment
