"""Newton-type corrections of exact estimators and the feasible bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exact_solver import CornerSolution, enumerate_corners, solve_table
from .model import check_theta
from .moments import MomentContext, Variant, g_hat, g_star_hat
from .nuisance import NuisanceComponents, SingularJacobianError, is_singular, plug_in


class UnsafeCorrectionError(ValueError):
    pass


@dataclass(frozen=True)
class CorrectionResult:
    theta_input: np.ndarray
    theta_output: np.ndarray
    kind: str
    components: NuisanceComponents | None = None


def _solve(G, v) -> np.ndarray:
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if is_singular(G):
        raise SingularJacobianError("Newton-type step needs an invertible Jacobian")
    return np.linalg.solve(G, np.atleast_1d(v))


def newton_step(ctx: MomentContext, theta, G, steps: int = 1, refresh=None) -> np.ndarray:
    """``T(theta) = theta - G^{-1} g_hat(theta)``, iterated ``steps`` times with a fixed ``G``.

    ``refresh(theta) -> G`` re-estimates the Jacobian before every step.
    """
    theta = check_theta(theta, ctx.ds.k)
    for _ in range(steps):
        jac = G if refresh is None else refresh(theta)
        theta = theta - _solve(jac, g_hat(ctx, theta))
    return theta


def symmetric_step(ctx: MomentContext, theta, G) -> np.ndarray:
    """Average of the Newton corrections built on ``g_hat`` and on ``-g_star_hat``."""
    theta = check_theta(theta, ctx.ds.k)
    return theta - _solve(G, 0.5 * (g_hat(ctx, theta) - g_star_hat(ctx, theta)))


def bias_term(comps: NuisanceComponents, n: int) -> np.ndarray:
    """``(1/n) G^{-1} [kappa1 + Q' vec(Omega) / 2]``."""
    vec_omega = comps.Omega.reshape(-1, order="F")
    return _solve(comps.G, comps.kappa1 + 0.5 * comps.Q.T @ vec_omega) / n


def bias_correct(ctx: MomentContext, theta_sym, comps: NuisanceComponents, n: int | None = None) -> np.ndarray:
    theta_sym = check_theta(theta_sym, ctx.ds.k)
    return theta_sym + bias_term(comps, ctx.ds.n if n is None else n)


def corrected(ctx: MomentContext, solution, comps: NuisanceComponents, G_sym=None, unsafe: bool = False):
    """Exact estimate -> symmetric step -> bias correction.

    ``solution`` must be a corner solution unless ``unsafe`` is set, in
    which case any parameter vector is accepted.  ``G_sym`` overrides the
    Jacobian used in the symmetric step.
    """
    if hasattr(solution, "subset"):
        theta = solution.theta
    elif unsafe:
        theta = check_theta(solution, ctx.ds.k)
    else:
        raise UnsafeCorrectionError("symmetric correction expects an exact corner solution; pass unsafe=True to override")
    G = comps.G if G_sym is None else G_sym
    sym = symmetric_step(ctx, theta, G)
    bc = bias_correct(ctx, sym, comps)
    return (CorrectionResult(theta, sym, "symmetric", comps),
            CorrectionResult(sym, bc, "bias_corrected", comps))


def theta_one(ctx: MomentContext, theta0, G) -> np.ndarray:
    """Infeasible linear estimator ``theta0 - G^{-1} g_hat(theta0)`` (needs the truth)."""
    theta0 = check_theta(theta0, ctx.ds.k)
    return theta0 - _solve(G, g_hat(ctx, theta0))


ESTIMATORS = ("exact-l1", "exact-l2", "exact-linf", "onestep", "sym", "bc")


@dataclass(frozen=True)
class PipelineReport:
    """Every stage of exact estimate -> Newton / symmetric step -> bias correction."""

    estimator: str
    theta: np.ndarray
    exact: CornerSolution
    components: NuisanceComponents | None = None
    onestep: np.ndarray | None = None
    symmetric: np.ndarray | None = None
    bias: np.ndarray | None = None
    bias_corrected: np.ndarray | None = None


def run_pipeline(ctx: MomentContext, estimator: str = "bc", norm="l1", components: NuisanceComponents | None = None,
                 kernel="gaussian", bandwidth: float | None = None, tie_break: str = "pointwise",
                 box=None, table=None) -> PipelineReport:
    """Compute ``estimator`` and the stages leading to it.

    ``exact-<p>`` estimators ignore ``norm``; the corrections start from the
    exact ``norm`` estimator.  Without ``components`` the nuisance quantities
    are kernel plug-ins at the exact estimate.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {', '.join(ESTIMATORS)}")
    table = enumerate_corners(ctx.ds, box=box) if table is None else table
    if estimator.startswith("exact-"):
        sol = solve_table(table, ctx.tau, estimator[len("exact-"):], Variant.STANDARD, tie_break)
        return PipelineReport(estimator=estimator, theta=sol.theta, exact=sol)
    sol = solve_table(table, ctx.tau, norm, Variant.STANDARD, tie_break)
    comps = plug_in(ctx, sol.theta, kernel=kernel, bandwidth=bandwidth) if components is None else components
    onestep = newton_step(ctx, sol.theta, comps.G)
    sym = symmetric_step(ctx, sol.theta, comps.G)
    bias = bias_term(comps, ctx.ds.n)
    bc = sym + bias
    theta = {"onestep": onestep, "sym": sym, "bc": bc}[estimator]
    return PipelineReport(estimator=estimator, theta=theta, exact=sol, components=comps, onestep=onestep,
                          symmetric=sym, bias=bias, bias_corrected=bc)
