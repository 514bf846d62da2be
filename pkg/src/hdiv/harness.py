"""Monte Carlo orchestration, summaries and CSV analysis."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import double_selection, non_orthogonal_2sls, oracle_estimate, stepwise_2sls
from .dgp import draw, make_params
from .errors import ConfigError, DataError, HdivError, WeakIdentificationError
from .lasso import LassoConfig
from .numkit import normal_quantile
from .orthogonal_iv import Dataset, estimate_nuisance, infer, score_statistic

log = logging.getLogger(__name__)

METHODS = ("oracle", "stepwise", "non-orthogonal", "double-selection")
HIST_RANGE = (-6.0, 6.0)
HIST_BINS = 48
Z_975 = normal_quantile(0.975)


@dataclass(frozen=True)
class ReplicationResult:
    method: str
    seed: int
    alpha_hat: float
    se_used: float
    t_stat: float
    reject_05: bool
    converged: bool
    se_homoscedastic: float = math.nan
    se_robust: float = math.nan
    calpha: float = math.nan
    score: float = math.nan
    checksum: str = ""
    error: str = ""


@dataclass
class MethodSummary:
    method: str
    median_bias: float
    mad: float
    size: float
    n_converged: int
    n_total: int
    hist_counts: list = field(default_factory=list)
    below: int = 0
    above: int = 0
    calpha_size: float = math.nan


@dataclass
class SimulationSummary:
    alpha0: float
    methods: dict
    bin_edges: list

    def get(self, method):
        return self.methods.get(method)


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 200
    p_x: int = 200
    p_z: int = 150
    alpha0: float = 0.0
    reps: int = 1000
    seed: int = 0
    methods: tuple = METHODS
    robust_se: bool = False
    workers: int = 1
    c: float = 1.1
    gamma: float = 0.1
    kkt_tol: float = 1e-7
    max_sweeps: int = 10_000
    loading_iterations: int = 2
    p_enter: float = 0.05
    p_remove: float = 0.10

    def lasso_config(self):
        return LassoConfig(c=self.c, gamma=self.gamma, kkt_tol=self.kkt_tol, max_sweeps=self.max_sweeps,
                           loading_iterations=self.loading_iterations)

    def dgp_params(self):
        return make_params(self.n, self.p_x, self.p_z, self.alpha0)

    def as_items(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append((f.name, str(v)))
        return out


def parse_methods(text):
    items = [m.strip() for m in str(text).split(",") if m.strip()]
    aliases = {"ds": "double-selection", "double_selection": "double-selection",
               "nonorth": "non-orthogonal", "non_orthogonal": "non-orthogonal"}
    items = [aliases.get(m, m) for m in items]
    bad = [m for m in items if m not in METHODS]
    if bad or not items:
        raise ConfigError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    return tuple(m for m in METHODS if m in items)


def _coerce(name, raw, kind):
    try:
        if kind is bool:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return parse_methods(raw)
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def read_key_values(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, **overrides):
    """Build a :class:`SimulationConfig` from a file, then apply non-None overrides."""
    types = {f.name: type(f.default) for f in fields(SimulationConfig)}
    values = {}
    if path is not None:
        for key, raw in read_key_values(path).items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, types[key])
    for key, v in overrides.items():
        if v is not None:
            values[key] = _coerce(key, v, types[key]) if isinstance(v, str) else v
    cfg = SimulationConfig(**values)
    if cfg.reps < 1:
        raise ConfigError("reps must be at least 1")
    if cfg.workers < 1:
        raise ConfigError("workers must be at least 1")
    cfg.lasso_config()
    cfg.dgp_params()
    return cfg


def data_checksum(data):
    h = hashlib.sha256()
    for a in (data.y, data.D, data.X, data.Z):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _record(method, seed, alpha0, res, robust_se, checksum, score=math.nan):
    a = float(res.alpha[0])
    se_h = float(res.se_homoscedastic_iv[0])
    se_r = float(res.se_robust[0])
    se = se_r if robust_se else se_h
    ok = bool(res.converged) and math.isfinite(a) and math.isfinite(se) and se > 0
    t = (a - alpha0) / se if ok else math.nan
    return ReplicationResult(method=method, seed=seed, alpha_hat=a, se_used=se, t_stat=t,
                             reject_05=bool(ok and abs(t) > Z_975), converged=ok,
                             se_homoscedastic=se_h, se_robust=se_r, calpha=score * score, score=score,
                             checksum=checksum)


def _failure(method, seed, checksum, exc):
    return ReplicationResult(method=method, seed=seed, alpha_hat=math.nan, se_used=math.nan,
                             t_stat=math.nan, reject_05=False, converged=False, checksum=checksum,
                             error=f"{type(exc).__name__}: {exc}")


def run_replication(params, cfg=None, methods=METHODS, seed=0, robust_se=False, p_enter=0.05, p_remove=0.10,
                    noiseless=False):
    """Draw one sample and evaluate every requested method on it.

    Method failures become non-converged records; nothing raises.
    """
    cfg = cfg or LassoConfig()
    methods = parse_methods(",".join(methods)) if not isinstance(methods, tuple) else methods
    sample = draw(params, seed, noiseless=noiseless)
    data = sample.data
    alpha0 = sample.alpha0
    chk = data_checksum(data)
    out = []
    eta = eta_err = None
    if "double-selection" in methods or "non-orthogonal" in methods:
        try:
            eta = estimate_nuisance(data, cfg)
        except HdivError as exc:
            eta_err = exc
    for m in methods:
        try:
            if m == "oracle":
                out.append(_record(m, seed, alpha0, oracle_estimate(data, sample.side), robust_se, chk))
            elif m == "stepwise":
                res = stepwise_2sls(data, p_enter, p_remove)
                out.append(_record(m, seed, alpha0, res, robust_se, chk))
            elif m == "non-orthogonal":
                res = non_orthogonal_2sls(data, cfg, eta=eta)
                out.append(_record(m, seed, alpha0, res, robust_se, chk))
            else:
                if eta is None:
                    raise eta_err
                res = double_selection(data, cfg, eta=eta, inversion=False)
                try:
                    score = float(score_statistic(data, [alpha0], eta)[0])
                except WeakIdentificationError:
                    score = math.inf
                out.append(_record(m, seed, alpha0, res, robust_se, chk, score=score))
        except (HdivError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out.append(_failure(m, seed, chk, exc))
    return out


def _run_chunk(args):
    params, cfg, methods, seeds, robust_se, p_enter, p_remove = args
    rows = []
    for s in seeds:
        rows.extend(run_replication(params, cfg, methods, s, robust_se, p_enter, p_remove))
    return rows


def run_simulation(sim):
    """All replications for a :class:`SimulationConfig`; seeds are ``seed + i``."""
    params = sim.dgp_params()
    cfg = sim.lasso_config()
    seeds = [sim.seed + i for i in range(sim.reps)]
    args = [(params, cfg, sim.methods, [s], sim.robust_se, sim.p_enter, sim.p_remove) for s in seeds]
    if sim.workers > 1:
        size = max(1, len(seeds) // (sim.workers * 8))
        chunks = [(params, cfg, sim.methods, seeds[i:i + size], sim.robust_se, sim.p_enter, sim.p_remove)
                  for i in range(0, len(seeds), size)]
        with ProcessPoolExecutor(max_workers=sim.workers) as pool:
            rows = [r for chunk in pool.map(_run_chunk, chunks) for r in chunk]
    else:
        rows = [r for a in args for r in _run_chunk(a)]
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (r.seed, order.get(r.method, 99)))
    return rows


def histogram(values):
    edges = np.linspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)
    v = np.asarray(values, dtype=float)
    below = int(np.sum(v < edges[0]))
    above = int(np.sum(v > edges[-1]))
    inside = v[(v >= edges[0]) & (v <= edges[-1])]
    counts, _ = np.histogram(inside, bins=edges)
    return edges, counts.astype(int).tolist(), below, above


def aggregate(results, alpha0):
    """Median bias, median absolute deviation, size and histogram per method."""
    buckets = {}
    for r in results:
        buckets.setdefault(r.method, []).append(r)
    edges = np.linspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)
    out = {}
    order = [m for m in METHODS if m in buckets] + sorted(m for m in buckets if m not in METHODS)
    for m in order:
        rows = buckets[m]
        conv = [r for r in rows if r.converged]
        if not conv:
            out[m] = MethodSummary(m, math.nan, math.nan, math.nan, 0, len(rows),
                                   [0] * HIST_BINS, 0, 0)
            continue
        dev = np.array([r.alpha_hat for r in conv]) - alpha0
        _, counts, below, above = histogram([r.t_stat for r in conv])
        cal = np.array([r.calpha for r in conv])
        cal = cal[~np.isnan(cal)]
        out[m] = MethodSummary(
            method=m,
            median_bias=float(np.median(dev)),
            mad=float(np.median(np.abs(dev))),
            size=float(np.mean([r.reject_05 for r in conv])),
            n_converged=len(conv),
            n_total=len(rows),
            hist_counts=counts,
            below=below,
            above=above,
            calpha_size=float(np.mean(cal > _chi2_95())) if cal.size else math.nan,
        )
    return SimulationSummary(alpha0=alpha0, methods=out, bin_edges=edges.tolist())


def _chi2_95():
    return Z_975 * Z_975


def _fmt(x):
    if isinstance(x, float):
        if math.isnan(x):
            return "NA"
        return repr(float(x)) if math.isfinite(x) else ("inf" if x > 0 else "-inf")
    return str(x)


def write_raw(results, path):
    names = [f.name for f in fields(ReplicationResult)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(names)
        for r in results:
            w.writerow([_fmt(getattr(r, k)) if not isinstance(getattr(r, k), bool) else int(getattr(r, k))
                        for k in names])


def read_raw(path):
    types = {f.name: f.type for f in fields(ReplicationResult)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            kw = {}
            for k, v in row.items():
                t = types[k]
                if t == "bool":
                    kw[k] = v == "1"
                elif t == "int":
                    kw[k] = int(v)
                elif t == "float":
                    kw[k] = math.nan if v == "NA" else float(v)
                else:
                    kw[k] = v
            out.append(ReplicationResult(**kw))
    return out


def emit_outputs(summary, out_dir, manifest=None, results=None):
    """Write ``summary.tsv``, one ``histogram_<method>.csv`` per method and ``run_manifest.txt``.

    ``results`` additionally produces ``raw.tsv``. Returns the written paths.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        p = out / "summary.tsv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["method", "bias", "mad", "size", "n_converged", "n_total", "calpha_size"])
            for m in summary.methods.values():
                w.writerow([m.method, _fmt(m.median_bias), _fmt(m.mad), _fmt(m.size), m.n_converged,
                            m.n_total, _fmt(m.calpha_size)])
        paths.append(p)
        edges = summary.bin_edges
        for m in summary.methods.values():
            p = out / f"histogram_{m.method}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["bin_left", "bin_right", "count"])
                w.writerow(["-inf", _fmt(float(edges[0])), m.below])
                for i, c in enumerate(m.hist_counts):
                    w.writerow([_fmt(float(edges[i])), _fmt(float(edges[i + 1])), c])
                w.writerow([_fmt(float(edges[-1])), "inf", m.above])
            paths.append(p)
        if manifest is not None:
            p = out / "run_manifest.txt"
            lines = [f"{k} = {v}" for k, v in manifest]
            p.write_text("\n".join(lines) + "\n")
            paths.append(p)
        if results is not None:
            p = out / "raw.tsv"
            write_raw(results, p)
            paths.append(p)
        return paths
    except OSError as exc:
        raise DataError(f"cannot write outputs under {out}: {exc}") from exc


def build_manifest(sim, summary):
    items = [("code_version", __version__)] + sim.as_items()
    items.append(("seed_range", f"{sim.seed}..{sim.seed + sim.reps - 1}"))
    items.append(("rng", "numpy Philox keyed by seed, ziggurat normals"))
    for m in summary.methods.values():
        items.append((f"failures.{m.method}", str(m.n_total - m.n_converged)))
    return items


ROLES = ("outcome", "endogenous", "control", "instrument", "ignore")


def read_roles(path):
    """Column-role file: ``column = role`` lines (same flat format as configs)."""
    roles = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'column = role'")
        col, role = (s.strip() for s in line.split("=", 1))
        if col in roles:
            raise ConfigError(f"column {col!r} is assigned more than one role")
        roles[col] = role
    return roles


def load_csv(path, roles):
    """Read a CSV into a :class:`Dataset`; an intercept column is prepended to the controls."""
    bad = {c: r for c, r in roles.items() if r not in ROLES}
    if bad:
        raise ConfigError(f"unknown roles {bad}; choose from {', '.join(ROLES)}")
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (header row is mandatory)") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        missing = [c for c in roles if c not in header]
        if missing:
            raise ConfigError(f"role file names columns not in the CSV: {missing}")
        unassigned = [c for c in header if c not in roles]
        if unassigned:
            raise ConfigError(f"columns without a role: {unassigned} (use 'ignore' to skip)")
        by_role = {r: [header.index(c) for c in header if roles[c] == r] for r in ROLES}
        if len(by_role["outcome"]) != 1:
            raise ConfigError("exactly one outcome column is required")
        if not by_role["endogenous"]:
            raise ConfigError("at least one endogenous column is required")
        used = sorted(i for r in ROLES[:-1] for i in by_role[r])
        rows = []
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = np.empty(len(header))
            vals[:] = np.nan
            for i in used:
                cell = row[i].strip()
                try:
                    vals[i] = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {header[i]!r} has non-numeric value {cell!r}") from None
                if not math.isfinite(vals[i]):
                    raise DataError(f"{path}:{lineno}: column {header[i]!r} is not finite")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    A = np.vstack(rows)
    n = A.shape[0]
    X = np.hstack([np.ones((n, 1)), A[:, by_role["control"]]])
    return Dataset(y=A[:, by_role["outcome"][0]], D=A[:, by_role["endogenous"]], X=X,
                   Z=A[:, by_role["instrument"]], intercept=0)


def run_csv(path, roles, cfg=None, level=0.95):
    """Nuisance estimation plus inference on a user CSV file."""
    if isinstance(roles, (str, os.PathLike)):
        roles = read_roles(roles)
    data = load_csv(path, roles)
    return infer(data, cfg or LassoConfig(), level=level)


def format_result(res, names=None):
    names = names or [f"alpha[{k}]" for k in range(res.alpha.shape[0])]
    lines = []
    for k, name in enumerate(names):
        lines.append(f"{name}: estimate {res.alpha[k]:.6g}  se(robust) {res.se_robust[k]:.6g}  "
                     f"se(homoscedastic IV) {res.se_homoscedastic_iv[k]:.6g}  "
                     f"Wald {res.level:.0%} CI [{res.wald_ci[k, 0]:.6g}, {res.wald_ci[k, 1]:.6g}]")
    iv = res.inversion_interval
    if iv is not None:
        lines.append(f"C(alpha) inversion {res.level:.0%} set: [{iv[0]:.6g}, {iv[1]:.6g}] "
                     f"({int(np.sum(res.inversion_accept))} of {len(res.inversion_accept)} grid points)")
    return "\n".join(lines)


def result_rows(res, names):
    rows = []
    iv = res.inversion_interval or (math.nan, math.nan)
    for k, name in enumerate(names):
        rows.append({
            "parameter": name,
            "estimate": res.alpha[k],
            "se_robust": res.se_robust[k],
            "se_homoscedastic_iv": res.se_homoscedastic_iv[k],
            "wald_lower": res.wald_ci[k, 0],
            "wald_upper": res.wald_ci[k, 1],
            "inversion_lower": iv[0] if res.alpha.shape[0] == 1 else math.nan,
            "inversion_upper": iv[1] if res.alpha.shape[0] == 1 else math.nan,
            "level": res.level,
        })
    return rows


def summary_as_dict(summary):
    return {m: asdict(s) for m, s in summary.methods.items()}
