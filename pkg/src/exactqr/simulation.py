"""Monte Carlo bias studies, rate-of-convergence studies and MCSE reporting.

Replication ``r`` always draws from ``replication_rng(master_seed, r)`` and
results are reduced in replication order, so tables do not depend on the
number of worker processes.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import corrections, nuisance
from .dgp import DgpId, DgpSpec, analytic_components, population_moment_le, replication_rng, sample, theta_true
from .exact_solver import enumerate_corners, optimal_corners, solve_table
from .moments import MomentContext, Variant, g_hat, g_star_hat, process_increment

logger = logging.getLogger(__name__)

PAPER_TAUS = (0.1, 0.15, 0.2, 0.25, 0.5, 0.75, 0.8, 0.85, 0.9)
ESTIMATORS = ("exact-l1", "exact-l2", "exact-linf", "onestep", "sym", "bc", "theta1")
RATE_QUANTITIES = ("moment_l1", "l1_vs_linf", "newton_vs_linear", "process_increment", "l1_vs_linf_selected")
GATED_QUANTITIES = RATE_QUANTITIES[:4]


@dataclass(frozen=True)
class StudyConfig:
    dgp: DgpId = DgpId.UNIFORM
    n: int = 50
    reps: int = 20000
    taus: tuple = PAPER_TAUS
    estimators: tuple = ("exact-l1", "bc")
    master_seed: int = 0
    threads: int = 1
    ns: tuple = ()
    nuisance: str = "analytic"
    kernel: str = "gaussian"
    bandwidth: float | None = None
    tie_break: str = "lex"
    theta_box: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "dgp", DgpId.parse(self.dgp))
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "ns", tuple(int(v) for v in self.ns))
        if self.reps < 2:
            raise ValueError("a study needs at least 2 replications")
        if any(not 0.0 < t < 1.0 for t in self.taus):
            raise ValueError("quantile levels must lie in (0, 1)")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown estimator {bad[0]!r}; expected one of {', '.join(ESTIMATORS)}")
        if self.nuisance not in ("analytic", "plugin"):
            raise ValueError("nuisance must be 'analytic' or 'plugin'")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


def mcse(samples) -> float:
    """Monte Carlo standard error ``sd / sqrt(R)`` (population sd)."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("MCSE needs at least 2 samples")
    return float(np.std(x) / math.sqrt(x.size))


def _map_replications(fn, cfg: StudyConfig, reps: int, *args) -> list:
    """Apply ``fn(cfg, r, *args)`` to every replication, returned in replication order."""
    if cfg.threads == 1 or reps < 2:
        return [fn(cfg, r, *args) for r in range(reps)]
    chunks = np.array_split(np.arange(reps), min(reps, cfg.threads * 4))
    with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
        parts = pool.map(_run_chunk, [(fn, cfg, list(map(int, c)), args) for c in chunks])
        return [item for part in parts for item in part]


def _run_chunk(job):
    fn, cfg, indices, args = job
    return [fn(cfg, r, *args) for r in indices]


def _box(cfg: StudyConfig, k: int):
    return None if cfg.theta_box is None else np.asarray(cfg.theta_box, dtype=float).reshape(k, 2)


# ---------------------------------------------------------------------------
# per-replication estimator pipeline

def estimate_all(ds, tau: float, estimators, *, table=None, truth=None, nuisance_mode="analytic",
                 kernel="gaussian", bandwidth=None, tie_break="lex", box=None) -> dict:
    """Compute the requested estimators for one dataset and quantile level.

    ``truth`` (an :class:`AnalyticTruth`) is required for analytic nuisance
    components and for the infeasible ``theta1``.
    """
    ctx = MomentContext(ds, tau)
    table = enumerate_corners(ds, box=box) if table is None else table
    out = {}
    for name in ("exact-l1", "exact-l2", "exact-linf"):
        if name in estimators:
            out[name] = corrections.run_pipeline(ctx, name, table=table, tie_break=tie_break).theta
    if any(e in estimators for e in ("onestep", "sym", "bc")):
        if nuisance_mode == "analytic" and truth is None:
            raise ValueError("analytic nuisance components need a DGP")
        comps = nuisance.from_truth(truth) if nuisance_mode == "analytic" else None
        rep = corrections.run_pipeline(ctx, "bc", components=comps, kernel=kernel, bandwidth=bandwidth,
                                       tie_break=tie_break, table=table)
        out.update(onestep=rep.onestep, sym=rep.symmetric, bc=rep.bias_corrected)
    if "theta1" in estimators:
        if truth is None:
            raise ValueError("theta1 needs the true parameter and Jacobian")
        out["theta1"] = corrections.theta_one(ctx, truth.theta0, truth.G)
    return out


def _bias_replication(cfg: StudyConfig, r: int, truths):
    spec = DgpSpec(cfg.dgp, cfg.n)
    ds = sample(spec, replication_rng(cfg.master_seed, r))
    k = spec.k
    errs = np.full((len(cfg.taus), len(cfg.estimators), k), np.nan)
    table = enumerate_corners(ds, box=_box(cfg, k))
    for a, tau in enumerate(cfg.taus):
        try:
            est = estimate_all(ds, tau, cfg.estimators, table=table, truth=truths[a],
                               nuisance_mode=cfg.nuisance, kernel=cfg.kernel, bandwidth=cfg.bandwidth,
                               tie_break=cfg.tie_break)
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("replication %d, tau %s excluded: %s", r, tau, exc)
            continue
        for b, name in enumerate(cfg.estimators):
            errs[a, b] = est[name] - truths[a].theta0
    return errs


def _truths(cfg: StudyConfig):
    out = []
    for tau in cfg.taus:
        try:
            out.append(analytic_components(cfg.dgp, tau))
        except ValueError:
            out.append(None)
    return out


@dataclass(frozen=True)
class BiasRow:
    tau: float
    estimator: str
    coef: int
    scaled_bias: float
    mcse: float
    band: float

    @property
    def within_band(self) -> bool:
        return abs(self.scaled_bias) <= self.band


@dataclass
class BiasTable:
    dgp: str
    n: int
    reps: int
    rows: list
    excluded: dict = field(default_factory=dict)
    errors: np.ndarray | None = field(default=None, repr=False)

    COLUMNS = ("tau", "estimator", "coef", "scaled_bias", "mcse", "band")

    def select(self, estimator: str, coef: int | None = None) -> list:
        return [r for r in self.rows if r.estimator == estimator and (coef is None or r.coef == coef)]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow([repr(r.tau), r.estimator, r.coef, repr(r.scaled_bias), repr(r.mcse), repr(r.band)])
        return path

    def summary(self) -> str:
        head = f"{'tau':>6} {'estimator':>10} {'coef':>4} {'n*bias':>10} {'mcse':>9} {'3*mcse':>9}  in band"
        lines = [f"bias study: {self.dgp}, n={self.n}, reps={self.reps}", head]
        for r in self.rows:
            lines.append(f"{r.tau:6.3f} {r.estimator:>10} {r.coef:4d} {r.scaled_bias:10.4f} {r.mcse:9.4f} "
                         f"{r.band:9.4f}  {'yes' if r.within_band else 'no'}")
        if any(self.excluded.values()):
            lines.append(f"excluded replications per tau: {self.excluded}")
        return "\n".join(lines)


def run_bias_study(cfg: StudyConfig) -> BiasTable:
    """Scaled bias ``n * mean(theta_hat - theta0)`` with MCSE bands for every estimator and tau."""
    truths = _truths(cfg)
    results = _map_replications(_bias_replication, cfg, cfg.reps, truths)
    errs = np.stack(results)                     # (reps, taus, estimators, k)
    rows, excluded = [], {}
    for a, tau in enumerate(cfg.taus):
        valid = ~np.isnan(errs[:, a]).any(axis=(1, 2))
        excluded[tau] = int((~valid).sum())
        for b, name in enumerate(cfg.estimators):
            for j in range(errs.shape[-1]):
                x = errs[valid, a, b, j]
                if x.size < 2:
                    rows.append(BiasRow(tau, name, j + 1, math.nan, math.nan, math.nan))
                    continue
                se = cfg.n * mcse(x)
                rows.append(BiasRow(tau, name, j + 1, float(cfg.n * x.mean()), se, 3.0 * se))
    return BiasTable(dgp=cfg.dgp.value, n=cfg.n, reps=cfg.reps, rows=rows, excluded=excluded, errors=errs)


# ---------------------------------------------------------------------------
# rates

def _rate_replication(cfg: StudyConfig, r: int, n: int, tau: float, truth):
    spec = DgpSpec(cfg.dgp, n)
    ds = sample(spec, replication_rng(cfg.master_seed, r))
    ctx = MomentContext(ds, tau)
    table = enumerate_corners(ds, box=_box(cfg, spec.k))
    l1 = solve_table(table, tau, "l1", Variant.STANDARD, cfg.tie_break)
    linf = solve_table(table, tau, "linf", Variant.STANDARD, cfg.tie_break)
    newton = corrections.newton_step(ctx, l1.theta, truth.G)
    linear = corrections.theta_one(ctx, truth.theta0, truth.G)
    inc = process_increment(ctx, lambda th: population_moment_le(cfg.dgp, th), l1.theta, truth.theta0)
    a = table.thetas[optimal_corners(table, tau, "l1")]
    b = table.thetas[optimal_corners(table, tau, "linf")]
    widest = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)).max()
    return np.array([
        np.abs(l1.moment).sum(),
        widest,
        np.linalg.norm(newton - linear),
        np.abs(inc.value).sum() / math.sqrt(n),
        np.linalg.norm(l1.theta - linf.theta),
    ])


def loglog_slope(ns, values) -> tuple[float, float]:
    """Least-squares slope of ``log(values)`` on ``log(ns)`` and its standard error."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    if x.size < 3:
        raise ValueError("a slope needs at least 3 sample sizes")
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    sigma2 = resid @ resid / (x.size - 2)
    cov = sigma2 * np.linalg.inv(X.T @ X)
    return float(coef[1]), float(math.sqrt(cov[1, 1]))


@dataclass
class RateTable:
    dgp: str
    tau: float
    reps: int
    ns: tuple
    medians: dict                     # quantity -> array over ns
    slopes: dict                      # quantity -> (slope, se)
    samples: np.ndarray | None = field(default=None, repr=False)

    COLUMNS = ("quantity", "n", "median", "slope", "slope_se")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for q in RATE_QUANTITIES:
                slope, se = self.slopes[q]
                for n, med in zip(self.ns, self.medians[q]):
                    writer.writerow([q, n, repr(float(med)), repr(slope), repr(se)])
        return path

    def summary(self) -> str:
        lines = [f"rate study: {self.dgp}, tau={self.tau}, reps={self.reps}",
                 f"{'quantity':>20} " + " ".join(f"{n:>10d}" for n in self.ns) + f" {'slope':>8} {'se':>6}"]
        for q in RATE_QUANTITIES:
            slope, se = self.slopes[q]
            meds = " ".join(f"{m:10.3e}" for m in self.medians[q])
            lines.append(f"{q:>20} {meds} {slope:8.3f} {se:6.3f}")
        return "\n".join(lines)


def run_rate_study(cfg: StudyConfig, tau: float | None = None) -> RateTable:
    """Medians of the four rate quantities at each sample size in ``cfg.ns`` and their log-log slopes.

    Quantities: ``||g_hat(l1)||_1``, ``||l1 - linf||_2``,
    ``||T(l1) - theta1||_2`` and ``||B_n(l1)||_1 / sqrt(n)``.  The argmin
    closures of the two norms usually share vertices, so the tie-broken pair
    is identical in most replications.  ``l1_vs_linf`` therefore takes the
    largest distance over all pairs of optimal vertices, which bounds every
    selection; the tie-broken distance is kept as ``l1_vs_linf_selected``.
    """
    ns = tuple(sorted(cfg.ns))
    if len(ns) < 3 or len(set(ns)) != len(ns):
        raise ValueError("a rate study needs at least 3 distinct sample sizes")
    tau = cfg.taus[0] if tau is None else float(tau)
    truth = analytic_components(cfg.dgp, tau)
    samples = np.empty((len(ns), cfg.reps, len(RATE_QUANTITIES)))
    for a, n in enumerate(ns):
        samples[a] = np.stack(_map_replications(_rate_replication, cfg, cfg.reps, n, tau, truth))
    medians = {q: np.median(samples[:, :, i], axis=1) for i, q in enumerate(RATE_QUANTITIES)}
    slopes = {}
    for q, med in medians.items():
        slopes[q] = loglog_slope(ns, med) if np.all(med > 0) else (math.nan, math.nan)
    return RateTable(dgp=cfg.dgp.value, tau=tau, reps=cfg.reps, ns=ns, medians=medians, slopes=slopes,
                     samples=samples)


# ---------------------------------------------------------------------------
# zero-residual component

def _kappa2_replication(cfg: StudyConfig, r: int, variant):
    spec = DgpSpec(cfg.dgp, cfg.n)
    ds = sample(spec, replication_rng(cfg.master_seed, r))
    table = enumerate_corners(ds, box=_box(cfg, spec.k))
    out = np.empty((len(cfg.taus), spec.k))
    for a, tau in enumerate(cfg.taus):
        ctx = MomentContext(ds, tau)
        sol = solve_table(table, tau, "l1", variant, cfg.tie_break)
        out[a] = ds.n * (g_hat(ctx, sol.theta) + g_star_hat(ctx, sol.theta)) / 2.0
    return out


def measure_kappa2(cfg: StudyConfig, variant=Variant.STANDARD) -> np.ndarray:
    """Monte Carlo mean of ``n (g_hat + g_star_hat) / 2`` at the corner solution, per tau."""
    vals = np.stack(_map_replications(_kappa2_replication, cfg, cfg.reps, Variant(variant)))
    return vals.mean(axis=0)


def with_threads(cfg: StudyConfig, threads: int) -> StudyConfig:
    return replace(cfg, threads=threads)
