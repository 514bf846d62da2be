"""Comparison estimators: infeasible oracle, stepwise, non-orthogonal and no-selection IV."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .errors import ConfigError, DataError, EstimationError, RankDeficiencyError
from .lasso import LassoConfig, feasible_lasso
from .numkit import normal_quantile, ols, tsls
from .orthogonal_iv import (
    InferenceResult,
    RegressionStep,
    estimate_nuisance,
    infer,
)


@dataclass(frozen=True)
class OracleSideInfo:
    E_y_given_x: np.ndarray
    E_d_given_x: np.ndarray
    zeta_delta: np.ndarray


def _wald(alpha, se, level):
    z = normal_quantile(1 - (1 - level) / 2)
    return np.column_stack([alpha - z * se, alpha + z * se])


def _from_tsls(res, p_d, level, method):
    alpha = res.alpha[:p_d]
    return InferenceResult(
        alpha=alpha,
        se_robust=res.se_robust[:p_d],
        se_homoscedastic_iv=res.se_homoscedastic[:p_d],
        wald_ci=_wald(alpha, res.se_homoscedastic[:p_d], level),
        level=level,
        method=method,
    )


def oracle_estimate(data, side, level=0.95):
    """IV regression of ``y - E[y|x]`` on ``d - E[d|x]`` with instrument ``zeta'delta``."""
    n = data.n
    arrays = (side.E_y_given_x, side.E_d_given_x, side.zeta_delta)
    if any(np.shape(a) != (n,) for a in arrays):
        raise ConfigError(f"oracle side information must have length n={n}")
    if data.p_d != 1:
        raise ConfigError("the oracle estimator is defined for a single endogenous variable")
    instr = np.asarray(side.zeta_delta, dtype=float)
    if np.ptp(instr) == 0.0:
        raise DataError("oracle instrument has zero variance")
    y_t = data.y - side.E_y_given_x
    d_t = data.D[:, 0] - side.E_d_given_x
    controls = None if data.intercept is None else data.X[:, [data.intercept]]
    return _from_tsls(tsls(y_t, d_t, instr, controls), 1, level, "oracle")


class _OlsPath:
    """OLS on a growing column set, kept as an incremental QR factorization."""

    def __init__(self, X, y, base):
        self.X = X
        self.y = y
        self.n = X.shape[0]
        self.colsq = np.einsum("ij,ij->j", X, X)
        self.rebuild(list(base))

    def rebuild(self, base):
        self.base = list(base)
        k = len(self.base)
        if k:
            Q, R = np.linalg.qr(self.X[:, self.base])
            if np.min(np.abs(np.diag(R))) < 1e-10 * np.max(np.abs(np.diag(R))):
                raise RankDeficiencyError(f"stepwise design on {k} columns is rank deficient", support_size=k)
            self.Q = Q
            self.Rinv = sla.solve_triangular(R, np.eye(k))
            self.qy = Q.T @ self.y
            self.Xr = self.X - Q @ (Q.T @ self.X)
            self.yr = self.y - Q @ self.qy
        else:
            self.Q = np.zeros((self.n, 0))
            self.Rinv = np.zeros((0, 0))
            self.qy = np.zeros(0)
            self.Xr = self.X.copy()
            self.yr = self.y.copy()

    @property
    def k(self):
        return len(self.base)

    def add(self, j):
        x = self.X[:, j]
        r = self.Q.T @ x
        w = x - self.Q @ r
        r2 = self.Q.T @ w
        w -= self.Q @ r2
        r += r2
        rho = float(np.sqrt(w @ w))
        q = w / rho
        k = self.k
        Rinv = np.zeros((k + 1, k + 1))
        Rinv[:k, :k] = self.Rinv
        Rinv[:k, k] = -self.Rinv @ r / rho
        Rinv[k, k] = 1.0 / rho
        self.Rinv = Rinv
        self.Q = np.column_stack([self.Q, q])
        self.qy = np.append(self.qy, q @ self.y)
        self.Xr -= np.outer(q, q @ self.Xr)
        self.yr -= q * (q @ self.yr)
        self.base.append(j)

    def rss(self):
        return float(self.yr @ self.yr)

    def entry_pvalues(self, candidates):
        """Partial t-test p-values for adding each candidate (NaN if collinear)."""
        out = np.full(candidates.shape[0], np.nan)
        df = self.n - self.k - 1
        if df <= 0 or candidates.size == 0:
            return out
        Xr = self.Xr[:, candidates]
        ss = np.einsum("ij,ij->j", Xr, Xr)
        ok = ss > 1e-10 * np.maximum(self.colsq[candidates], 1e-300)
        xy = Xr.T @ self.yr
        rss0 = self.rss()
        with np.errstate(divide="ignore", invalid="ignore"):
            rss1 = np.maximum(rss0 - xy**2 / ss, 0.0)
            t = xy / np.sqrt(ss) / np.sqrt(rss1 / df)
        t = np.where(np.isnan(t), 0.0, t)
        out[ok] = 2.0 * stats.t.sf(np.abs(t[ok]), df)
        return out

    def member_pvalues(self):
        df = self.n - self.k
        if df <= 0 or self.k == 0:
            return np.zeros(self.k)
        coef = self.Rinv @ self.qy
        sigma2 = self.rss() / df
        se = np.sqrt(sigma2 * np.einsum("ij,ij->i", self.Rinv, self.Rinv))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = coef / se
        t = np.where(np.isnan(t), np.inf, t)
        return 2.0 * stats.t.sf(np.abs(t), df)


def stepwise_select(X, y, p_enter=0.05, p_remove=0.10, forced=(), start=(), max_steps=None):
    """Forward-backward stepwise selection with homoscedastic partial t-tests.

    Adds the candidate with the smallest entry p-value below ``p_enter``, then
    drops the worst included variable while its p-value exceeds ``p_remove``,
    until neither move applies or another regressor would leave fewer than
    two residual degrees of freedom. ``forced`` columns are always included
    and never tested. Ties go to the lowest column index.
    """
    if not (0 < p_enter <= p_remove < 1):
        raise ConfigError(f"need 0 < p_enter <= p_remove < 1, got {p_enter}, {p_remove}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    forced = sorted(set(int(j) for j in forced))
    selected = [int(j) for j in start if int(j) not in forced]
    path = _OlsPath(X, y, forced + selected)
    is_cand = np.ones(p, dtype=bool)
    is_cand[forced] = False
    max_steps = max_steps or 20 * p + 100
    seen = {frozenset(selected)}
    tiny = 1e-14 * max(float(y @ y), 1e-300)
    for _ in range(max_steps):
        changed = False
        if path.k + 1 <= n - 2 and path.rss() > tiny:
            mask = is_cand.copy()
            mask[selected] = False
            cands = np.flatnonzero(mask)
            pv = path.entry_pvalues(cands)
            if np.any(~np.isnan(pv)):
                i = int(np.nanargmin(pv))
                if pv[i] < p_enter:
                    path.add(int(cands[i]))
                    selected.append(int(cands[i]))
                    changed = True
        while selected:
            pv = path.member_pvalues()[len(forced):]
            worst = float(pv.max())
            if not worst > p_remove:
                break
            drop = min(selected[i] for i in np.flatnonzero(pv == worst))
            selected.remove(drop)
            path.rebuild(forced + selected)
            changed = True
        if not changed:
            break
        state = frozenset(selected)
        if state in seen:
            break
        seen.add(state)
    return np.array(sorted(selected), dtype=int)


def stepwise_step(p_enter=0.05, p_remove=0.10):
    """Nuisance fitter for :func:`estimate_nuisance`: stepwise selection, then OLS."""

    def fit(F, target, cfg, forced):
        sel = stepwise_select(F, target, p_enter, p_remove, forced=forced)
        support = np.union1d(sel, np.asarray(forced, dtype=int)).astype(int)
        coef = ols(F, target, support) if support.size else np.zeros(F.shape[1])
        return RegressionStep(coefficients=coef, support=support, selected=sel)

    return fit


def stepwise_2sls(data, p_enter=0.05, p_remove=0.10, level=0.95, alpha0=None):
    """The three-step nuisance procedure with stepwise selection in place of Lasso."""
    eta = estimate_nuisance(data, fitter=stepwise_step(p_enter, p_remove))
    res = infer(data, level=level, alpha0=alpha0, eta=eta, inversion=False)
    return _with_method(res, "stepwise")


def double_selection(data, cfg=None, level=0.95, alpha0=None, mode="post-lasso", eta=None, inversion=True):
    res = infer(data, cfg, mode, level, alpha0=alpha0, eta=eta, inversion=inversion)
    return _with_method(res, "double-selection")


def _with_method(res, method):
    return replace(res, method=method)


def _lasso_selection(data, cfg, eta=None):
    """Lasso supports (before refitting) of d on (x, z) and of y on x."""
    px = data.p_x
    forced = data.forced_controls()
    sel_d = []
    if eta is not None and all(key in eta.steps for key in [(1, k) for k in range(data.p_d)] + [(2, None)]):
        sel_d = [np.asarray(eta.steps[(1, k)].selected) for k in range(data.p_d)]
        sel_y = np.asarray(eta.steps[(2, None)].selected)
    else:
        cfg = cfg or LassoConfig()
        F = np.hstack([data.X, data.Z])
        for k in range(data.p_d):
            sel_d.append(feasible_lasso(F, data.D[:, k], cfg.replace(unpenalized=forced)).fit.support)
        sel_y = feasible_lasso(data.X, data.y, cfg.replace(unpenalized=forced)).fit.support
    sel_d = np.unique(np.concatenate(sel_d)).astype(int) if sel_d else np.zeros(0, dtype=int)
    ix_d = sel_d[sel_d < px]
    iz_d = sel_d[sel_d >= px] - px
    return ix_d, iz_d, sel_y


def non_orthogonal_2sls(data, cfg=None, level=0.95, eta=None):
    """2SLS using the union of Lasso-selected controls and the Lasso-selected instruments.

    ``eta`` may carry Lasso fits from :func:`estimate_nuisance` (steps 1 and 2
    are the same regressions) to avoid refitting.
    """
    ix_d, iz_d, ix_y = _lasso_selection(data, cfg, eta)
    if iz_d.size == 0:
        raise EstimationError("no instruments selected in the Lasso of d on (x, z)")
    controls = np.union1d(np.union1d(ix_d, ix_y), np.asarray(data.forced_controls(), dtype=int)).astype(int)
    C = data.X[:, controls] if controls.size else None
    res = tsls(data.y, data.D, data.Z[:, iz_d], C)
    return _from_tsls(res, data.p_d, level, "non-orthogonal")


def no_selection(data, use_instruments=True, level=0.95):
    """OLS (``use_instruments=False``) or 2SLS with every control and instrument."""
    n = data.n
    if use_instruments:
        k = data.p_x + data.p_z
        if k >= n:
            raise DataError(f"2SLS without selection needs p_x + p_z < n (got {k} >= {n})")
        res = tsls(data.y, data.D, data.Z, data.X)
        return _from_tsls(res, data.p_d, level, "2sls")
    k = data.p_x + data.p_d
    if k >= n:
        raise DataError(f"OLS without selection needs p_x + p_d < n (got {k} >= {n})")
    res = tsls(data.y, data.D, data.D, data.X)
    return _from_tsls(res, data.p_d, level, "ols")
