"""Kernel plug-in and analytic nuisance components for the corrections.

Density-weighted moments are smoothed in the fitted residuals
``e_i = Y_i - W_i' theta_hat``:

    G_hat      = (1/(n h))   sum K(e_i/h) Z_i W_i'
    kappa1_hat = (tau - 1/2) (1/(n h)) sum K(e_i/h) Z_i (W_i' G_hat^{-1} Z_i)
    dG_hat_j   = -(1/(n h^2)) sum K'(e_i/h) W_i W_i' Z_ij
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .dgp import AnalyticTruth, q_matrix
from .moments import MomentContext


class Kernel(str, enum.Enum):
    GAUSSIAN = "gaussian"
    EPANECHNIKOV = "epanechnikov"
    UNIFORM = "uniform"

    @classmethod
    def parse(cls, token) -> "Kernel":
        if isinstance(token, cls):
            return token
        try:
            return cls(str(token).lower())
        except ValueError:
            raise ValueError(f"unknown kernel {token!r}; expected gaussian|epanechnikov|uniform") from None


class SingularJacobianError(np.linalg.LinAlgError):
    pass


def kernel_value(kernel, u):
    kernel = Kernel.parse(kernel)
    u = np.asarray(u, dtype=float)
    if kernel is Kernel.GAUSSIAN:
        return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    if kernel is Kernel.EPANECHNIKOV:
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return np.where(np.abs(u) <= 0.5, 1.0, 0.0)


def kernel_derivative(kernel, u):
    kernel = Kernel.parse(kernel)
    u = np.asarray(u, dtype=float)
    if kernel is Kernel.GAUSSIAN:
        return -u * np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    if kernel is Kernel.EPANECHNIKOV:
        # kinks at |u| = 1 are measure zero
        return np.where(np.abs(u) < 1.0, -1.5 * u, 0.0)
    raise ValueError("the uniform kernel is not differentiable; use gaussian or epanechnikov")


def rule_of_thumb(residuals, n: int | None = None, exponent: float = 0.2) -> float:
    """``1.06 * sd(residuals) * n^(-exponent)``; ``exponent=1/7`` for derivative estimates."""
    residuals = np.asarray(residuals, dtype=float)
    n = residuals.size if n is None else n
    sd = float(np.std(residuals, ddof=1))
    return 1.06 * sd * n ** (-exponent)


def _check_h(h: float) -> float:
    h = float(h)
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    return h


def condition_number(G) -> float:
    return float(np.linalg.cond(G))


def is_singular(G, rcond: float = 1e-12) -> bool:
    G = np.asarray(G, dtype=float)
    if not np.all(np.isfinite(G)) or not np.any(G):
        return True
    return condition_number(G) > 1.0 / rcond


def estimate_G(ctx: MomentContext, theta_hat, h: float | None = None, kernel="gaussian",
               raise_singular: bool = False) -> np.ndarray:
    """Powell-type kernel estimate of the Jacobian ``E f_e(0|W,Z) Z W'``."""
    ds = ctx.ds
    e = ctx.residuals(theta_hat)
    h = rule_of_thumb(e) if h is None else _check_h(h)
    kv = kernel_value(kernel, e / h)
    G = (ds.z * kv[:, None]).T @ ds.w / (ds.n * h)
    if raise_singular and is_singular(G):
        raise SingularJacobianError("estimated Jacobian is singular")
    return G


def estimate_kappa1(ctx: MomentContext, theta_hat, G_hat, h: float | None = None, kernel="gaussian") -> np.ndarray:
    ds = ctx.ds
    if is_singular(G_hat):
        raise SingularJacobianError("kappa1 needs an invertible Jacobian")
    e = ctx.residuals(theta_hat)
    h = rule_of_thumb(e) if h is None else _check_h(h)
    kv = kernel_value(kernel, e / h)
    quad = np.einsum("ij,ij->i", ds.w, np.linalg.solve(G_hat, ds.z.T).T)
    return (ctx.tau - 0.5) * (ds.z * (kv * quad)[:, None]).sum(axis=0) / (ds.n * h)


def estimate_Omega(ctx: MomentContext, theta_hat) -> np.ndarray:
    """Sample covariance (mean removed, divisor ``n``) of ``Z_i (1{Y_i <= W_i' theta} - tau)``."""
    e = ctx.residuals(theta_hat)
    m = ctx.ds.z * ((e <= ctx.zeta).astype(float) - ctx.tau)[:, None]
    m = m - m.mean(axis=0)
    return m.T @ m / ctx.ds.n


def estimate_dG(ctx: MomentContext, theta_hat, h: float | None = None, kernel="gaussian") -> tuple:
    """Weighted average derivative estimates of the moment Hessians ``d^2 g_j / dtheta dtheta'``."""
    ds = ctx.ds
    e = ctx.residuals(theta_hat)
    h = rule_of_thumb(e, exponent=1 / 7) if h is None else _check_h(h)
    kd = -kernel_derivative(kernel, e / h) / (ds.n * h * h)
    return tuple((ds.w * (kd * ds.z[:, j])[:, None]).T @ ds.w for j in range(ds.k))


@dataclass(frozen=True)
class NuisanceComponents:
    G: np.ndarray
    Omega: np.ndarray
    kappa1: np.ndarray
    Q: np.ndarray
    dG: tuple
    provenance: str
    bandwidth: float | None = None

    @property
    def condition(self) -> float:
        return condition_number(self.G)


def assemble(G, Omega, kappa1, dG, provenance: str = "plugin", bandwidth: float | None = None) -> NuisanceComponents:
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if is_singular(G):
        raise SingularJacobianError("cannot assemble components around a singular Jacobian")
    dG = tuple(np.atleast_2d(np.asarray(d, dtype=float)) for d in dG)
    return NuisanceComponents(G=G, Omega=np.atleast_2d(np.asarray(Omega, dtype=float)),
                              kappa1=np.atleast_1d(np.asarray(kappa1, dtype=float)),
                              Q=q_matrix(G, dG), dG=dG, provenance=provenance, bandwidth=bandwidth)


def from_truth(truth: AnalyticTruth) -> NuisanceComponents:
    return NuisanceComponents(G=truth.G, Omega=truth.Omega, kappa1=truth.kappa1, Q=truth.Q,
                              dG=truth.dG, provenance="analytic")


def plug_in(ctx: MomentContext, theta_hat, kernel="gaussian", bandwidth: float | None = None,
            derivative_bandwidth: float | None = None, derivative_kernel=None) -> NuisanceComponents:
    """All plug-in components at ``theta_hat`` with rule-of-thumb bandwidths unless given.

    ``derivative_kernel`` defaults to ``kernel`` and must be differentiable.
    """
    e = ctx.residuals(theta_hat)
    h = rule_of_thumb(e) if bandwidth is None else _check_h(bandwidth)
    h_d = rule_of_thumb(e, exponent=1 / 7) if derivative_bandwidth is None else _check_h(derivative_bandwidth)
    d_kernel = kernel if derivative_kernel is None else derivative_kernel
    G = estimate_G(ctx, theta_hat, h, kernel, raise_singular=True)
    kappa1 = estimate_kappa1(ctx, theta_hat, G, h, kernel)
    Omega = estimate_Omega(ctx, theta_hat)
    dG = estimate_dG(ctx, theta_hat, h_d, d_kernel)
    return assemble(G, Omega, kappa1, dG, provenance="plugin", bandwidth=h)
