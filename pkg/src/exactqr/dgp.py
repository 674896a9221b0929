"""Location-model data generators, analytic truths and the uniform order-statistic bias.

The Monte Carlo designs draw ``X ~ U(0,1)``, ``U ~ U(0,1)`` and set
``Y = X + F^{-1}(U)`` with ``W = Z = (1, X)'``.  The one-dimensional design
uses ``W = Z = 1`` and ``Y = U``.

The Cauchy design uses the normalized scale-1/4 Cauchy density
``4 / (pi (1 + (4t)^2))``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .model import Dataset, check_tau


class DgpId(str, enum.Enum):
    UNIFORM = "dgp1"
    TRIANGULAR = "dgp2"
    CAUCHY = "dgp3"
    UNIVARIATE_UNIFORM = "uniform1d"

    @classmethod
    def parse(cls, token) -> "DgpId":
        if isinstance(token, cls):
            return token
        try:
            return cls(str(token).lower())
        except ValueError:
            valid = "|".join(m.value for m in cls)
            raise ValueError(f"unknown DGP {token!r}; expected one of {valid}") from None


class SingularDensityError(ValueError):
    pass


@dataclass(frozen=True)
class DgpSpec:
    id: DgpId
    n: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "id", DgpId.parse(self.id) if not isinstance(self.id, DgpId) else self.id)
        if self.n < 3:
            raise ValueError(f"DGP sample size must be >= 3, got {self.n}")

    @property
    def k(self) -> int:
        return 1 if self.id is DgpId.UNIVARIATE_UNIFORM else 2


# ---------------------------------------------------------------------------
# error distributions

def cdf(dgp: DgpId, t):
    t = np.asarray(t, dtype=float)
    if dgp is DgpId.CAUCHY:
        return 0.5 + np.arctan(4.0 * t) / math.pi
    c = np.clip(t, 0.0, 1.0)
    return c * c if dgp is DgpId.TRIANGULAR else c


def quantile(dgp: DgpId, u):
    u = np.asarray(u, dtype=float)
    if dgp is DgpId.TRIANGULAR:
        return np.sqrt(u)
    if dgp is DgpId.CAUCHY:
        return 0.25 * np.tan(math.pi * (u - 0.5))
    return u


def density(dgp: DgpId, t):
    t = np.asarray(t, dtype=float)
    if dgp is DgpId.CAUCHY:
        return 4.0 / (math.pi * (1.0 + 16.0 * t * t))
    inside = (t >= 0.0) & (t <= 1.0)
    if dgp is DgpId.TRIANGULAR:
        return np.where(inside, 2.0 * t, 0.0)
    return np.where(inside, 1.0, 0.0)


def density_derivative(dgp: DgpId, t):
    t = np.asarray(t, dtype=float)
    if dgp is DgpId.CAUCHY:
        return -128.0 * t / (math.pi * (1.0 + 16.0 * t * t) ** 2)
    inside = (t >= 0.0) & (t <= 1.0)
    if dgp is DgpId.TRIANGULAR:
        return np.where(inside, 2.0, 0.0)
    return np.zeros_like(t)


# ---------------------------------------------------------------------------
# sampling

def replication_rng(master_seed: int, replication: int) -> np.random.Generator:
    """Independent stream for one Monte Carlo replication.

    Depends only on ``(master_seed, replication)``, never on scheduling.
    """
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(replication),)))


def sample(spec: DgpSpec, rng: np.random.Generator | None = None) -> Dataset:
    """Draw ``spec.n`` observations; ``rng`` defaults to one seeded by ``spec.seed``."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    n = spec.n
    if spec.id is DgpId.UNIVARIATE_UNIFORM:
        u = rng.random(n)
        return Dataset(u, np.ones((n, 1)))
    x = rng.random(n)
    u = rng.random(n)
    w = np.column_stack([np.ones(n), x])
    return Dataset(x + quantile(spec.id, u), w)


def theta_true(spec: DgpSpec | DgpId, tau: float) -> np.ndarray:
    dgp = spec.id if isinstance(spec, DgpSpec) else DgpId.parse(spec)
    q = float(quantile(dgp, check_tau(tau)))
    if dgp is DgpId.UNIVARIATE_UNIFORM:
        return np.array([q])
    return np.array([q, 1.0])


# ---------------------------------------------------------------------------
# design moments of W = Z = (1, X)', X ~ U(0,1)

def _x_moment(power: int) -> float:
    return 1.0 / (power + 1)


def design_moment_quadrature(fn) -> float:
    """``E fn(X)`` for ``X ~ U(0,1)``; fallback for designs without closed forms."""
    return integrate.quad(fn, 0.0, 1.0, epsabs=1e-13, epsrel=1e-13)[0]


def design_moments(k: int):
    """Return ``(E[ZW'], [E[W W' Z_j] for j])`` for the bivariate or univariate design."""
    if k == 1:
        return np.ones((1, 1)), [np.ones((1, 1))]
    mom = np.array([[_x_moment(i + j) for j in range(2)] for i in range(2)])
    third = [np.array([[_x_moment(i + j + p) for j in range(2)] for i in range(2)]) for p in range(2)]
    return mom, third


@dataclass(frozen=True)
class AnalyticTruth:
    theta0: np.ndarray
    G: np.ndarray
    Omega: np.ndarray
    kappa1: np.ndarray
    Q: np.ndarray
    dG: tuple


def q_matrix(G: np.ndarray, dG) -> np.ndarray:
    """Columns ``vec[(G^{-1})' dG_j G^{-1}]`` (column-major vec)."""
    Ginv = np.linalg.inv(G)
    cols = [(Ginv.T @ d @ Ginv).reshape(-1, order="F") for d in dG]
    return np.column_stack(cols)


def analytic_components(spec: DgpSpec | DgpId, tau: float) -> AnalyticTruth:
    dgp = spec.id if isinstance(spec, DgpSpec) else DgpId.parse(spec)
    tau = check_tau(tau)
    theta0 = theta_true(dgp, tau)
    if dgp is DgpId.UNIVARIATE_UNIFORM:
        fq, dfq, k = 1.0, 0.0, 1
    else:
        qv = float(quantile(dgp, tau))
        fq, dfq, k = float(density(dgp, qv)), float(density_derivative(dgp, qv)), 2
    if not fq > 1e-14:
        raise SingularDensityError(f"error density vanishes at the {tau}-quantile of {dgp.value}")
    mom, third = design_moments(k)
    G = fq * mom
    Omega = tau * (1.0 - tau) * mom
    Minv = np.linalg.inv(mom)
    # E[Z (W' M^{-1} Z)] with Z = W = (1, X): sum over polynomial terms of X
    if k == 1:
        ezq = np.array([Minv[0, 0]])
    else:
        ezq = np.array([sum(Minv[a, b] * _x_moment(a + b + p) for a in range(2) for b in range(2))
                        for p in range(2)])
    kappa1 = (tau - 0.5) * ezq
    dG = tuple(dfq * t for t in third)
    return AnalyticTruth(theta0=theta0, G=G, Omega=Omega, kappa1=kappa1, Q=q_matrix(G, dG), dG=dG)


def population_moment_le(spec: DgpSpec | DgpId, theta) -> np.ndarray:
    """``E 1{Y <= W'theta} Z`` for the location model, by quadrature over X."""
    dgp = spec.id if isinstance(spec, DgpSpec) else DgpId.parse(spec)
    theta = np.asarray(theta, dtype=float)
    if dgp is DgpId.UNIVARIATE_UNIFORM:
        return np.array([float(cdf(dgp, theta[0]))])
    a, b = theta[0], theta[1] - 1.0

    def integrand(x, p):
        return float(cdf(dgp, a + b * x)) * x ** p

    points = []
    if dgp is not DgpId.CAUCHY and b != 0.0:
        points = [x for x in ((0.0 - a) / b, (1.0 - a) / b) if 0.0 < x < 1.0]
    return np.array([integrate.quad(integrand, 0.0, 1.0, args=(p,), points=points or None,
                                    epsabs=1e-12, epsrel=1e-12)[0] for p in range(2)])


# ---------------------------------------------------------------------------
# uniform order statistics

def _floor_product(tau: float, n: int) -> tuple[int, float]:
    tn = tau * n
    r = round(tn)
    if abs(tn - r) < 1e-9 * max(1.0, abs(tn)):
        tn = float(r)
    k = math.floor(tn)
    return k, tn - k


def uniform_orderstat_bias(n: int, tau: float, corner: str = "lower", kind: str = "exact") -> float:
    """Bias of ``Y_(k)`` (lower) or ``Y_(k+1)`` (upper), ``k = floor(tau n)``, for U(0,1) data.

    ``kind="exact"`` uses ``E Y_(j) = j/(n+1)``; ``kind="asymptotic"`` the
    four-component expansion to order ``1/n``.
    """
    tau = check_tau(tau)
    corner, kind = corner.lower(), kind.lower()
    if corner not in ("lower", "upper") or kind not in ("exact", "asymptotic"):
        raise ValueError(f"bad corner/kind: {corner!r}, {kind!r}")
    k, frac = _floor_product(tau, n)
    j = k if corner == "lower" else k + 1
    if not 1 <= j <= n:
        raise ValueError(f"order statistic Y_({j}) undefined for n={n}, tau={tau}")
    if kind == "exact":
        return j / (n + 1) - tau
    if corner == "lower":
        return -frac / n - tau / n
    return -frac / n + (1.0 - tau) / n
