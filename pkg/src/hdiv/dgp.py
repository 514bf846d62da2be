"""Monte Carlo design: linear IV model with many controls and instruments.

    y = alpha0 * d + x'beta + 2 eps
    d = x'gamma + z'delta + u
    z = Pi x + 0.125 zeta

with (eps, u) standard bivariate normal with correlation 0.6, zeta ~ N(0, I),
x ~ N(0, Sigma), Sigma_kj = 0.5^|j-k|, and Pi = [I, 0].

Draws use numpy's Philox counter-based generator keyed by the seed, with
normals from numpy's ziggurat sampler, so a seed maps to the same sample on
every platform and in every worker process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz

from .errors import ConfigError
from .baselines import OracleSideInfo
from .orthogonal_iv import Dataset


@dataclass(frozen=True)
class DgpParams:
    n: int
    p_x: int
    p_z: int
    alpha0: float
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    Pi: np.ndarray
    Sigma: np.ndarray
    err_corr: float = 0.6
    noise_scale_y: float = 2.0
    zeta_scale: float = 0.125
    toeplitz_rho: float = 0.5

    def as_dict(self):
        """Scalar settings, for config files and run manifests."""
        return {
            "n": self.n,
            "p_x": self.p_x,
            "p_z": self.p_z,
            "alpha0": self.alpha0,
            "err_corr": self.err_corr,
            "noise_scale_y": self.noise_scale_y,
            "zeta_scale": self.zeta_scale,
            "toeplitz_rho": self.toeplitz_rho,
        }


@dataclass(frozen=True)
class DrawnSample:
    data: Dataset
    side: OracleSideInfo
    alpha0: float
    eps: np.ndarray
    u: np.ndarray


def nu_constant(p_x):
    return 4.0 / 9.0 + sum(1.0 / j**2 for j in range(5, p_x + 1))


def make_params(n=200, p_x=200, p_z=150, alpha0=0.0, *, err_corr=0.6, noise_scale_y=2.0,
                zeta_scale=0.125, toeplitz_rho=0.5):
    if p_z > p_x:
        raise ConfigError(f"p_z={p_z} exceeds p_x={p_x}; Pi = [I, 0] needs p_z <= p_x")
    if p_z < 1 or n < 1:
        raise ConfigError("need n >= 1 and p_z >= 1")
    if not -1 < err_corr < 1 or not -1 < toeplitz_rho < 1:
        raise ConfigError("correlations must lie in (-1, 1)")
    nu = nu_constant(p_x)
    j = np.arange(1, p_x + 1, dtype=float)
    beta = np.where(j <= 4, 1.0 / (9.0 * nu), 1.0 / (j**2 * nu))
    delta = 3.0 / np.arange(1, p_z + 1, dtype=float) ** 2
    Pi = np.hstack([np.eye(p_z), np.zeros((p_z, p_x - p_z))])
    Sigma = toeplitz(toeplitz_rho ** np.arange(p_x))
    return DgpParams(
        n=n, p_x=p_x, p_z=p_z, alpha0=float(alpha0), beta=beta, gamma=beta.copy(), delta=delta,
        Pi=Pi, Sigma=Sigma, err_corr=err_corr, noise_scale_y=noise_scale_y, zeta_scale=zeta_scale,
        toeplitz_rho=toeplitz_rho,
    )


def make_rng(seed):
    return np.random.Generator(np.random.Philox(key=int(seed)))


def draw(params, seed, *, add_intercept=True, noiseless=False):
    """One sample of size ``params.n``.

    The returned :class:`Dataset` carries an intercept column at index 0 of X
    unless ``add_intercept`` is False. ``noiseless`` zeroes eps and u (used to
    check exact recovery).
    """
    rng = make_rng(seed)
    n = params.n
    try:
        L = np.linalg.cholesky(params.Sigma)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("Sigma is not positive definite") from exc
    x = rng.standard_normal((n, params.p_x)) @ L.T
    e = rng.standard_normal((n, 2))
    eps = e[:, 0]
    u = params.err_corr * e[:, 0] + np.sqrt(1.0 - params.err_corr**2) * e[:, 1]
    zeta = rng.standard_normal((n, params.p_z))
    if noiseless:
        eps = np.zeros(n)
        u = np.zeros(n)
    z = x @ params.Pi.T + params.zeta_scale * zeta
    d = x @ params.gamma + z @ params.delta + u
    y = params.alpha0 * d + x @ params.beta + params.noise_scale_y * eps
    E_d = x @ params.gamma + (x @ params.Pi.T) @ params.delta
    E_y = params.alpha0 * E_d + x @ params.beta
    X = np.hstack([np.ones((n, 1)), x]) if add_intercept else x
    data = Dataset(y=y, D=d[:, None], X=X, Z=z, intercept=0 if add_intercept else None)
    side = OracleSideInfo(E_y_given_x=E_y, E_d_given_x=E_d, zeta_delta=zeta @ params.delta)
    return DrawnSample(data=data, side=side, alpha0=params.alpha0, eps=eps, u=u)


def population_covariance(params):
    """Covariance of w = (y, d, x, z) implied by the design (all means are zero)."""
    Sx = params.Sigma
    Pi = params.Pi
    s2 = params.zeta_scale**2
    Szz = Pi @ Sx @ Pi.T + s2 * np.eye(params.p_z)
    Sxz = Sx @ Pi.T
    g, dl, b, a = params.gamma, params.delta, params.beta, params.alpha0
    # d = f'c_d + u, y = f'c_y + k eps with f = (x, z)
    c_d = np.concatenate([g, dl])
    c_y = a * c_d + np.concatenate([b, np.zeros(params.p_z)])
    Sf = np.block([[Sx, Sxz], [Sxz.T, Szz]])
    k = params.noise_scale_y
    rho = params.err_corr
    var_d = c_d @ Sf @ c_d + 1.0
    cov_yd = c_y @ Sf @ c_d + a * 1.0 + k * rho
    var_y = c_y @ Sf @ c_y + a * a + 2 * a * k * rho + k * k
    cov_y_f = Sf @ c_y
    cov_d_f = Sf @ c_d
    m = 2 + params.p_x + params.p_z
    S = np.empty((m, m))
    S[0, 0] = var_y
    S[1, 1] = var_d
    S[0, 1] = S[1, 0] = cov_yd
    S[0, 2:] = S[2:, 0] = cov_y_f
    S[1, 2:] = S[2:, 1] = cov_d_f
    S[2:, 2:] = Sf
    return S


def true_nuisance(params):
    """Population nuisance values (theta, vartheta, gamma, delta) for one endogenous variable."""
    Pi = params.Pi
    vartheta = params.gamma + Pi.T @ params.delta
    theta = params.alpha0 * vartheta + params.beta
    return theta, vartheta, params.gamma.copy(), params.delta.copy()
