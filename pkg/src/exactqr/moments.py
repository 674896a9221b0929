"""Sample quantile moments, their symmetrized counterpart and related quantities."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import Dataset, check_tau, check_theta


class Norm(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"

    @classmethod
    def parse(cls, token) -> "Norm":
        if isinstance(token, cls):
            return token
        try:
            return cls(str(token).lower())
        except ValueError:
            raise ValueError(f"unknown norm {token!r}; expected l1|l2|linf") from None


class Variant(str, enum.Enum):
    STANDARD = "standard"
    SYMMETRIZED = "symmetrized"


def zero_tolerance(y: np.ndarray) -> float:
    """Residuals with ``|r| <= zeta`` count as exact zeros."""
    scale = float(np.max(np.abs(y))) if y.size else 0.0
    return 2.0 ** -40 * (scale if scale > 0 else 1.0)


@dataclass(frozen=True)
class MomentContext:
    ds: Dataset
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "tau", check_tau(self.tau))

    @property
    def zeta(self) -> float:
        return zero_tolerance(self.ds.y)

    def residuals(self, theta) -> np.ndarray:
        return self.ds.y - self.ds.w @ check_theta(theta, self.ds.k)


def g_hat(ctx: MomentContext, theta) -> np.ndarray:
    """``E_n (1{Y <= W'theta} - tau) Z``; zero residuals count as ``<=``."""
    r = ctx.residuals(theta)
    ind = (r <= ctx.zeta).astype(float)
    return (ind - ctx.tau) @ ctx.ds.z / ctx.ds.n


def g_star_hat(ctx: MomentContext, theta) -> np.ndarray:
    """Symmetrized moment ``E_n (1{-Y <= -W'theta} - (1 - tau)) Z``, evaluated at ``-theta``."""
    r = ctx.residuals(theta)
    ind = (r < -ctx.zeta).astype(float)
    return (ctx.tau - ind) @ ctx.ds.z / ctx.ds.n


def zero_residual_mass(ctx: MomentContext, theta) -> np.ndarray:
    """``E_n Z 1{|Y - W'theta| <= zeta}``."""
    r = ctx.residuals(theta)
    return (np.abs(r) <= ctx.zeta).astype(float) @ ctx.ds.z / ctx.ds.n


def norm_value(g, p) -> float:
    p = Norm.parse(p)
    g = np.asarray(g, dtype=float)
    if p is Norm.L1:
        return float(np.abs(g).sum())
    if p is Norm.L2:
        return float(math.sqrt((g * g).sum()))
    return float(np.abs(g).max())


def batch_norm(g: np.ndarray, p) -> np.ndarray:
    """Norm along the last (short) axis."""
    p = Norm.parse(p)
    g = np.asarray(g, dtype=float)
    # explicit loop: numpy reductions over a length-k trailing axis are slow
    cols = [g[..., j] for j in range(g.shape[-1])]
    if p is Norm.L1:
        out = np.abs(cols[0])
        for c in cols[1:]:
            out += np.abs(c)
        return out
    if p is Norm.L2:
        out = cols[0] * cols[0]
        for c in cols[1:]:
            out += c * c
        return np.sqrt(out)
    out = np.abs(cols[0])
    for c in cols[1:]:
        np.maximum(out, np.abs(c), out=out)
    return out


def objective(ctx: MomentContext, theta, p="l1") -> float:
    return norm_value(g_hat(ctx, theta), p)


def g_hat_many(ctx: MomentContext, thetas: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """``g_hat`` at each row of ``thetas``; used by brute-force oracles."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    out = np.empty((thetas.shape[0], ctx.ds.k))
    zbar = ctx.ds.z.mean(axis=0)
    for start in range(0, thetas.shape[0], chunk):
        block = thetas[start:start + chunk]
        r = ctx.ds.y[None, :] - block @ ctx.ds.w.T
        out[start:start + chunk] = (r <= ctx.zeta).astype(float) @ ctx.ds.z / ctx.ds.n - ctx.tau * zbar
    return out


def moments_many(ctx: MomentContext, thetas: np.ndarray, chunk: int = 4096):
    """``(g_hat, g_star_hat, zero_residual_mass)`` at each row of ``thetas``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    m = thetas.shape[0]
    out = tuple(np.empty((m, ctx.ds.k)) for _ in range(3))
    z, n, tau = ctx.ds.z, ctx.ds.n, ctx.tau
    zsum = z.sum(axis=0)
    for start in range(0, m, chunk):
        block = thetas[start:start + chunk]
        r = ctx.ds.y[None, :] - block @ ctx.ds.w.T
        le = (r <= ctx.zeta).astype(float) @ z
        lt = (r < -ctx.zeta).astype(float) @ z
        zero = (np.abs(r) <= ctx.zeta).astype(float) @ z
        sl = slice(start, start + block.shape[0])
        out[0][sl] = (le - tau * zsum) / n
        out[1][sl] = (tau * zsum - lt) / n
        out[2][sl] = zero / n
    return out


@dataclass(frozen=True)
class ProcessIncrement:
    value: np.ndarray
    theta_a: np.ndarray
    theta_b: np.ndarray


class UnsupportedOracleError(RuntimeError):
    pass


def process_increment(ctx: MomentContext, oracle, theta_a, theta_b) -> ProcessIncrement:
    """``sqrt(n) [(g°_n - g°)(theta_a) - (g°_n - g°)(theta_b)]`` with ``g°(theta) = E 1{Y <= W'theta} Z``.

    ``oracle`` maps ``theta`` to the population ``g°(theta)``; observational
    data has none.
    """
    if oracle is None:
        raise UnsupportedOracleError("process increments need a population moment oracle")
    ds = ctx.ds
    theta_a = check_theta(theta_a, ds.k)
    theta_b = check_theta(theta_b, ds.k)

    def centered(theta):
        r = ctx.residuals(theta)
        emp = (r <= ctx.zeta).astype(float) @ ds.z / ds.n
        return emp - np.asarray(oracle(theta), dtype=float)

    value = math.sqrt(ds.n) * (centered(theta_a) - centered(theta_b))
    return ProcessIncrement(value=value, theta_a=theta_a, theta_b=theta_b)
