"""Exact minimization of ``||g_hat(theta)||_p`` over corner (basic) solutions.

``g_hat`` is constant on every open cell of the arrangement of hyperplanes
``{theta : Y_i = W_i' theta}``.  Every cell touches some vertex ``theta_S``
(the solution of ``W_S theta = Y_S`` for a ``k``-subset ``S``), and the cells
around that vertex are reached by switching the ``k`` defining indicators
between 0 and 1.  Scanning the ``2^k`` switch patterns at every vertex
therefore sees every attainable value of the objective.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset
from .moments import MomentContext, Norm, Variant, batch_norm, g_hat, g_hat_many, norm_value, zero_tolerance

SINGULAR_RTOL = 1e-10
VALUE_ATOL = 1e-12


class NoCornerError(ValueError):
    pass


@dataclass
class CornerTable:
    """All nonsingular vertices of a dataset with their tau-free indicator sums.

    ``below_le[c]`` is ``sum Z_l 1{r_l <= zeta}`` and ``below_lt[c]`` is
    ``sum Z_l 1{r_l < -zeta}``, both over observations outside the defining
    subset of corner ``c``.
    """

    ds: Dataset
    subsets: np.ndarray
    thetas: np.ndarray
    below_le: np.ndarray
    below_lt: np.ndarray
    singular: int = 0
    outside_box: int = 0
    _switch_sums: np.ndarray | None = field(default=None, repr=False)
    _moments: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return self.subsets.shape[0]

    @property
    def switches(self) -> np.ndarray:
        k = self.ds.k
        return np.array(list(itertools.product((0.0, 1.0), repeat=k)))

    @property
    def switch_sums(self) -> np.ndarray:
        """``sum_{i in S} e_i Z_i`` for every corner and switch pattern, shape ``(C, 2^k, k)``."""
        if self._switch_sums is None:
            zs = self.ds.z[self.subsets]
            e = self.switches
            out = np.zeros((len(self), e.shape[0], self.ds.k))
            for p, pattern in enumerate(e):
                for a in np.flatnonzero(pattern):
                    out[:, p, :] += zs[:, a, :]
            self._switch_sums = out
        return self._switch_sums


def _subset_thetas(ds: Dataset, subsets: np.ndarray):
    if ds.k == 2:
        return _pair_thetas(ds, subsets)
    ws = ds.w[subsets]
    det = np.linalg.det(ws) if ds.k > 1 else ws[:, 0, 0]
    scale = np.prod(np.linalg.norm(ws, axis=2), axis=1)
    ok = np.abs(det) > SINGULAR_RTOL * scale
    thetas = np.full((subsets.shape[0], ds.k), np.nan)
    if ok.any():
        thetas[ok] = np.linalg.solve(ws[ok], ds.y[subsets[ok]][..., None])[..., 0]
    return thetas, ok


def _pair_thetas(ds: Dataset, subsets: np.ndarray):
    wi, wj = ds.w[subsets[:, 0]], ds.w[subsets[:, 1]]
    yi, yj = ds.y[subsets[:, 0]], ds.y[subsets[:, 1]]
    det = wi[:, 0] * wj[:, 1] - wi[:, 1] * wj[:, 0]
    scale = np.sqrt((wi * wi).sum(axis=1) * (wj * wj).sum(axis=1))
    ok = np.abs(det) > SINGULAR_RTOL * scale
    safe = np.where(ok, det, 1.0)
    thetas = np.column_stack([(yi * wj[:, 1] - yj * wi[:, 1]) / safe, (wi[:, 0] * yj - wj[:, 0] * yi) / safe])
    thetas[~ok] = np.nan
    return thetas, ok


def _brute_sums(ds: Dataset, subsets: np.ndarray, thetas: np.ndarray, chunk: int = 2048):
    zeta = zero_tolerance(ds.y)
    C = subsets.shape[0]
    le = np.empty((C, ds.k))
    lt = np.empty((C, ds.k))
    for a in range(0, C, chunk):
        b = min(a + chunk, C)
        r = ds.y[None, :] - thetas[a:b] @ ds.w.T
        mle = r <= zeta
        mlt = r < -zeta
        rows = np.arange(b - a)[:, None]
        mle[rows, subsets[a:b]] = False
        mlt[rows, subsets[a:b]] = False
        le[a:b] = mle.astype(float) @ ds.z
        lt[a:b] = mlt.astype(float) @ ds.z
    return le, lt


def _sweep_sums(ds: Dataset, block: int = 256):
    """Indicator sums for all pairs ``i < j`` when ``k == 2``, by sorting along each line.

    Returns ``None`` when concurrent lines make the ordering ambiguous.
    """
    n = ds.n
    y, w, z = ds.y, ds.w, ds.z
    zeta = zero_tolerance(y)
    wn = np.linalg.norm(w, axis=1)
    out_le = np.zeros((n, n, 2))
    out_lt = np.zeros((n, n, 2))
    for a in range(0, n, block):
        rows = np.arange(a, min(a + block, n))
        wi = w[rows]
        d = np.column_stack([-wi[:, 1], wi[:, 0]])
        nn = (wi * wi).sum(axis=1)
        tp = wi * (y[rows] / np.where(nn > 0, nn, 1.0))[:, None]
        c = y[None, :] - tp @ w.T
        slope = d @ w.T
        parallel = np.abs(slope) <= SINGULAR_RTOL * wn[rows, None] * wn[None, :]
        parallel[np.arange(len(rows)), rows] = True
        self_mask = np.zeros_like(parallel)
        self_mask[np.arange(len(rows)), rows] = True
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(parallel, np.inf, c / np.where(parallel, 1.0, slope))
        order = np.argsort(t, axis=1, kind="stable")
        ts = np.take_along_axis(t, order, axis=1)
        finite = np.isfinite(ts)
        with np.errstate(invalid="ignore"):
            gaps = np.diff(ts, axis=1)
        close = (np.abs(gaps) <= 1e-11 * (1.0 + np.abs(ts[:, 1:]))) & finite[:, 1:]
        if close.any():
            return None
        pos = ((~parallel) & (slope > 0)).astype(float)
        neg = ((~parallel) & (slope < 0)).astype(float)
        pos_sorted = np.take_along_axis(pos, order, axis=1)
        neg_sorted = np.take_along_axis(neg, order, axis=1)
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.broadcast_to(np.arange(n), order.shape), axis=1)
        par = parallel & ~self_mask
        par_le = (par & (c <= zeta)).astype(float) @ z
        par_lt = (par & (c < -zeta)).astype(float) @ z
        for comp in range(z.shape[1]):
            zc = z[:, comp]
            z_sorted = zc[order]
            cum_p = np.cumsum(pos_sorted * z_sorted, axis=1)
            cum_n = np.cumsum(neg_sorted * z_sorted, axis=1)
            at_p = np.take_along_axis(cum_p, rank, axis=1) - pos * zc[None, :]
            at_n = np.take_along_axis(cum_n, rank, axis=1)
            moving = at_p + (cum_n[:, -1:] - at_n)
            out_le[rows, :, comp] = moving + par_le[:, comp, None]
            out_lt[rows, :, comp] = moving + par_lt[:, comp, None]
    return out_le, out_lt


def enumerate_corners(ds: Dataset, box=None, method: str = "auto") -> CornerTable:
    """Every nonsingular ``k``-subset vertex, in lexicographic subset order.

    ``box`` is an optional ``(k, 2)`` array of lower/upper bounds; vertices
    outside it are dropped.  ``method`` is ``"auto"``, ``"brute"`` or ``"sweep"``.
    """
    n, k = ds.n, ds.k
    if n < k:
        raise NoCornerError("fewer observations than parameters")
    if k == 2:
        iu, ju = np.triu_indices(n, 1)
        subsets = np.column_stack([iu, ju])
    else:
        subsets = np.array(list(itertools.combinations(range(n), k)), dtype=int).reshape(-1, k)
    thetas, ok = _subset_thetas(ds, subsets)
    singular = int((~ok).sum())
    subsets, thetas = subsets[ok], thetas[ok]
    outside = 0
    if box is not None:
        box = np.asarray(box, dtype=float).reshape(k, 2)
        inside = np.all((thetas >= box[:, 0]) & (thetas <= box[:, 1]), axis=1)
        outside = int((~inside).sum())
        subsets, thetas = subsets[inside], thetas[inside]

    sums = None
    if method == "sweep" or (method == "auto" and k == 2 and n > 60):
        if k != 2:
            raise ValueError("sweep enumeration needs k == 2")
        full = _sweep_sums(ds)
        if full is not None:
            le, lt = full
            i, j = subsets[:, 0], subsets[:, 1]
            sums = (le[i, j], lt[i, j])
    if sums is None:
        sums = _brute_sums(ds, subsets, thetas)
    return CornerTable(ds=ds, subsets=subsets, thetas=thetas, below_le=sums[0], below_lt=sums[1],
                       singular=singular, outside_box=outside)


@dataclass(frozen=True)
class CornerSolution:
    theta: np.ndarray
    subset: tuple
    objective_value: float
    norm: Norm
    variant: Variant
    ties: int
    search_value: float
    moment: np.ndarray


TIE_BREAKS = ("pointwise", "lex")


def _pick(search: np.ndarray, at_corner: np.ndarray, tie_break: str) -> tuple[int, int]:
    """Index of the chosen corner and the number of optimal corners.

    All corners with the smallest search value are optimal.  ``"lex"``
    takes the first of them in subset order; ``"pointwise"`` first keeps
    those with the smallest objective evaluated at the corner itself.
    """
    best = search.min()
    cand = np.flatnonzero(search <= best + VALUE_ATOL)
    if tie_break == "pointwise":
        sub = at_corner[cand]
        return int(cand[sub <= sub.min() + VALUE_ATOL][0]), len(cand)
    if tie_break == "lex":
        return int(cand[0]), len(cand)
    raise ValueError(f"unknown tie break {tie_break!r}; expected one of {TIE_BREAKS}")


def corner_moments(table: CornerTable, tau: float, variant=Variant.STANDARD):
    """Moment vectors for every corner and switch pattern, plus the at-corner moments.

    Standard rows are ``g_hat`` with the ``<=`` convention at the corner;
    symmetrized rows are ``g_star_hat`` (switches count the strict ``<``).
    """
    variant = Variant(variant)
    key = (float(tau), variant)
    if key in table._moments:
        return table._moments[key]
    ds = table.ds
    zsum = ds.z.sum(axis=0)
    sw = table.switch_sums
    if variant is Variant.STANDARD:
        m = (table.below_le[:, None, :] + sw) / ds.n - tau * zsum / ds.n
        at = m[:, -1, :]
    else:
        m = (tau * zsum - table.below_lt[:, None, :] - sw) / ds.n
        at = m[:, 0, :]
    if len(table._moments) > 16:
        table._moments.clear()
    table._moments[key] = (m, at)
    return m, at


def optimal_corners(table: CornerTable, tau: float, p="l1", variant=Variant.STANDARD) -> np.ndarray:
    """Indices of every corner attaining the minimal search value (vertices of the argmin closure)."""
    m, _ = corner_moments(table, tau, Variant(variant))
    search = batch_norm(m, Norm.parse(p)).min(axis=1)
    return np.flatnonzero(search <= search.min() + VALUE_ATOL)


def solve_table(table: CornerTable, tau: float, p="l1", variant=Variant.STANDARD,
                tie_break: str = "pointwise") -> CornerSolution:
    if len(table) == 0:
        raise NoCornerError("no nonsingular corner available")
    p, variant = Norm.parse(p), Variant(variant)
    m, at = corner_moments(table, tau, variant)
    search = batch_norm(m, p).min(axis=1)
    at_val = batch_norm(at, p)
    idx, ties = _pick(search, at_val, tie_break)
    theta = table.thetas[idx].copy()
    ctx = MomentContext(table.ds, tau)
    moment = g_hat(ctx, theta)
    return CornerSolution(theta=theta, subset=tuple(int(s) for s in table.subsets[idx]),
                          objective_value=norm_value(moment, p), norm=p, variant=variant, ties=ties,
                          search_value=float(search[idx]), moment=moment)


def solve_exact(ctx: MomentContext, p="l1", variant=Variant.STANDARD, box=None,
                tie_break: str = "pointwise") -> CornerSolution:
    """Exact ``argmin ||g_hat||_p`` (or ``||g_star_hat||_p`` for the symmetrized variant).

    The search value of a corner is the smallest norm over the switch
    patterns of its defining indicators; the reported ``objective_value``
    is ``||g_hat||_p`` at the corner with the ``<=`` convention.
    """
    return solve_table(enumerate_corners(ctx.ds, box=box), ctx.tau, p, variant, tie_break)


def grid_oracle(ctx: MomentContext, p, lower, upper, points: int | tuple = 201):
    """Brute-force minimizer of ``||g_hat||_p`` over a rectangular grid.

    Returns ``(theta, value)``.  Test-only oracle.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    k = ctx.ds.k
    if lower.shape != (k,) or upper.shape != (k,):
        raise ValueError("grid bounds must have length k")
    counts = (points,) * k if np.isscalar(points) else tuple(points)
    if any(c < 1 for c in counts) or np.any(upper < lower):
        raise ValueError("empty grid")
    axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(lower, upper, counts)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)
    values = batch_norm(g_hat_many(ctx, mesh), p)
    i = int(np.argmin(values))
    return mesh[i], float(values[i])


# ---------------------------------------------------------------------------
# MILP export
#
# Plain-text model, one statement per line:
#
#   MODEL exactqr-milp-sos 1
#   PARAM <name> <value>
#   VAR <name> BINARY|NONNEG|FREE
#   MINIMIZE <coef> <var> [<coef> <var> ...]
#   CON <name> <coef> <var> ... <sense> <rhs>        sense in  = <= >=
#   SOS1 <name> <var> | <expr>                       expr is  <var>  or  1-<var>
#   END
#
# Numbers use 17 significant digits.

@dataclass
class MilpModel:
    params: dict
    variables: list          # (name, kind)
    objective: list          # (coef, var)
    constraints: list        # (name, [(coef, var)], sense, rhs)
    sos1: list               # (name, first, second)

    def band_constraints(self):
        return [c for c in self.constraints if c[0].startswith("band_")]


def _num(x: float) -> str:
    return f"{float(x):.17g}"


def build_milp(ctx: MomentContext) -> MilpModel:
    ds, tau = ctx.ds, ctx.tau
    n, k = ds.n, ds.k
    variables = ([(f"e[{i}]", "BINARY") for i in range(1, n + 1)]
                 + [(f"r[{i}]", "NONNEG") for i in range(1, n + 1)]
                 + [(f"s[{i}]", "NONNEG") for i in range(1, n + 1)]
                 + [(f"t[{l}]", "FREE") for l in range(1, k + 1)]
                 + [(f"theta[{j}]", "FREE") for j in range(1, k + 1)])
    objective = [(1.0, f"t[{l}]") for l in range(1, k + 1)]
    constraints = []
    for i in range(n):
        # r_i - s_i = Y_i - W_i' theta
        terms = [(1.0, f"r[{i + 1}]"), (-1.0, f"s[{i + 1}]")]
        terms += [(float(ds.w[i, j]), f"theta[{j + 1}]") for j in range(k)]
        constraints.append((f"fit[{i + 1}]", terms, "=", float(ds.y[i])))
    for l in range(k):
        zl = ds.z[:, l]
        ez = [(float(zl[i]), f"e[{i + 1}]") for i in range(n)]
        rhs = float(tau * zl.sum())
        constraints.append((f"band_lo[{l + 1}]", ez + [(1.0, f"t[{l + 1}]")], ">=", rhs))
        constraints.append((f"band_hi[{l + 1}]", ez + [(-1.0, f"t[{l + 1}]")], "<=", rhs))
    sos1 = []
    for i in range(1, n + 1):
        sos1.append((f"sos_r[{i}]", f"r[{i}]", f"e[{i}]"))
        sos1.append((f"sos_s[{i}]", f"s[{i}]", f"1-e[{i}]"))
    return MilpModel(params={"n": n, "k": k, "tau": tau}, variables=variables, objective=objective,
                     constraints=constraints, sos1=sos1)


def format_milp(model: MilpModel) -> str:
    lines = ["MODEL exactqr-milp-sos 1"]
    lines += [f"PARAM {key} {_num(val) if isinstance(val, float) else val}" for key, val in model.params.items()]
    lines += [f"VAR {name} {kind}" for name, kind in model.variables]
    lines.append("MINIMIZE " + " ".join(f"{_num(c)} {v}" for c, v in model.objective))
    for name, terms, sense, rhs in model.constraints:
        body = " ".join(f"{_num(c)} {v}" for c, v in terms)
        lines.append(f"CON {name} {body} {sense} {_num(rhs)}")
    lines += [f"SOS1 {name} {a} | {b}" for name, a, b in model.sos1]
    lines.append("END")
    return "\n".join(lines) + "\n"


def export_milp_sos(ctx: MomentContext) -> str:
    """The l1 moment-norm MILP with SOS1 complementarity, as model text."""
    return format_milp(build_milp(ctx))


_PARAM_INT = {"n", "k"}


def parse_milp(text: str) -> MilpModel:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("MODEL exactqr-milp-sos"):
        raise ValueError("not an exactqr MILP model")
    model = MilpModel(params={}, variables=[], objective=[], constraints=[], sos1=[])
    for ln in lines[1:]:
        head, _, rest = ln.partition(" ")
        if head == "END":
            return model
        if head == "PARAM":
            key, val = rest.split()
            model.params[key] = int(val) if key in _PARAM_INT else float(val)
        elif head == "VAR":
            name, kind = rest.split()
            model.variables.append((name, kind))
        elif head == "MINIMIZE":
            tok = rest.split()
            model.objective = [(float(tok[i]), tok[i + 1]) for i in range(0, len(tok), 2)]
        elif head == "CON":
            tok = rest.split()
            name, body, sense, rhs = tok[0], tok[1:-2], tok[-2], float(tok[-1])
            terms = [(float(body[i]), body[i + 1]) for i in range(0, len(body), 2)]
            model.constraints.append((name, terms, sense, rhs))
        elif head == "SOS1":
            m = re.fullmatch(r"(\S+) (\S+) \| (\S+)", rest)
            if m is None:
                raise ValueError(f"bad SOS1 line: {ln}")
            model.sos1.append(m.groups())
        else:
            raise ValueError(f"unknown statement: {ln}")
    raise ValueError("missing END")


def milp_point(ctx: MomentContext, theta) -> dict:
    """A feasible MILP assignment for ``theta``, with ``e_i = 1{Y_i <= W_i' theta}``."""
    r = ctx.residuals(theta)
    e = (r <= ctx.zeta).astype(float)
    g = (e - ctx.tau) @ ctx.ds.z
    point = {}
    for i in range(ctx.ds.n):
        point[f"e[{i + 1}]"] = e[i]
        point[f"r[{i + 1}]"] = max(r[i], 0.0) if e[i] == 0 else 0.0
        point[f"s[{i + 1}]"] = max(-r[i], 0.0) if e[i] == 1 else 0.0
    for l in range(ctx.ds.k):
        point[f"t[{l + 1}]"] = abs(g[l])
        point[f"theta[{l + 1}]"] = float(np.asarray(theta)[l])
    return point


def check_milp_point(model: MilpModel, point: dict, atol: float = 1e-9) -> float:
    """Verify ``point`` against every constraint; return the objective value."""
    def value(expr):
        return 1.0 - point[expr[2:]] if expr.startswith("1-") else point[expr]

    for name, kind in model.variables:
        v = point[name]
        if kind == "BINARY" and v not in (0.0, 1.0):
            raise ValueError(f"{name} not binary")
        if kind == "NONNEG" and v < -atol:
            raise ValueError(f"{name} negative")
    for name, terms, sense, rhs in model.constraints:
        lhs = math.fsum(c * point[v] for c, v in terms)
        bad = {"=": abs(lhs - rhs) > atol * (1 + abs(rhs)), "<=": lhs > rhs + atol, ">=": lhs < rhs - atol}[sense]
        if bad:
            raise ValueError(f"constraint {name} violated: {lhs} {sense} {rhs}")
    for name, a, b in model.sos1:
        if abs(value(a)) > atol and abs(value(b)) > atol:
            raise ValueError(f"SOS1 set {name} has two nonzero members")
    return math.fsum(c * point[v] for c, v in model.objective)
