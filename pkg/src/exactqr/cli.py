"""Command-line entry point.

Every verb parses and validates its flags, delegates to the library and
formats the result.  Errors exit nonzero and print one line to stderr::

    error: <category>: <message>

Config files hold flat ``key=value`` lines; ``#`` starts a comment.  Keys
are the long flag names with ``_`` in place of ``-``.  Flags given on the
command line override file values.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import corrections, nuisance
from .dgp import DgpId, SingularDensityError, analytic_components, uniform_orderstat_bias, _floor_product
from .exact_solver import NoCornerError, TIE_BREAKS, export_milp_sos
from .model import DatasetError, load_dataset, validate
from .moments import MomentContext, Norm
from .simulation import StudyConfig, run_bias_study, run_rate_study

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CONFIG = 5

CONFIG_KEYS = ("dgp", "n", "ns", "reps", "taus", "tau", "estimator", "seed", "threads", "norm", "nuisance",
               "kernel", "bandwidth", "tie_break", "theta_box", "out_dir", "data")


class ConfigError(ValueError):
    pass


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


# ---------------------------------------------------------------------------
# value parsing

def parse_taus(text: str) -> tuple:
    """``a:b:c`` (inclusive range with step ``c``) or a comma list."""
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"tau range must be start:stop:step, got {text!r}")
        a, b, c = map(float, parts)
        if c <= 0 or b < a:
            raise ValueError(f"empty tau range {text!r}")
        count = int(math.floor((b - a) / c + 1e-9)) + 1
        return tuple(round(a + i * c, 12) for i in range(count))
    return tuple(float(t) for t in text.split(",") if t.strip())


def parse_ints(text: str) -> tuple:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def parse_box(text: str, k: int | None = None) -> tuple:
    vals = [float(v) for v in str(text).split(",") if v.strip()]
    if not vals or len(vals) % 2 or (k is not None and len(vals) != 2 * k):
        raise ValueError("theta box needs lo1,hi1,...,lok,hik")
    return tuple(vals)


def read_settings(path) -> dict:
    """Read a ``key=value`` file into raw string values, rejecting unknown keys."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r} on line {lineno}")
        out[key] = value
    return out


def load_config(path, overrides: dict | None = None) -> StudyConfig:
    """:class:`StudyConfig` from a settings file; non-None ``overrides`` win over file values."""
    settings = read_settings(path)
    settings.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return study_config(settings)


def study_config(settings: dict) -> StudyConfig:
    """Build a :class:`StudyConfig` from merged file and flag settings."""
    kw = {}
    if "dgp" in settings:
        kw["dgp"] = settings["dgp"]
    if "n" in settings:
        kw["n"] = int(settings["n"])
    if "ns" in settings:
        kw["ns"] = parse_ints(settings["ns"])
    if "reps" in settings:
        kw["reps"] = int(settings["reps"])
    if "taus" in settings:
        kw["taus"] = parse_taus(settings["taus"])
    elif "tau" in settings:
        kw["taus"] = (float(settings["tau"]),)
    if "estimator" in settings:
        kw["estimators"] = tuple(e.strip() for e in str(settings["estimator"]).split(",") if e.strip())
    if "seed" in settings:
        kw["master_seed"] = int(settings["seed"])
    for key in ("threads",):
        if key in settings:
            kw[key] = int(settings[key])
    for key in ("nuisance", "kernel", "tie_break"):
        if key in settings:
            kw[key] = str(settings[key])
    if "bandwidth" in settings:
        kw["bandwidth"] = float(settings["bandwidth"])
    if "theta_box" in settings:
        kw["theta_box"] = parse_box(settings["theta_box"])
    return StudyConfig(**kw)


# ---------------------------------------------------------------------------
# argument parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exactqr", description="Exact quantile moment estimators and bias corrections.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, *names):
        if "data" in names:
            p.add_argument("--data", help="CSV with columns y, w1..wk[, z1..zk]")
        if "dgp" in names:
            p.add_argument("--dgp", help="dgp1|dgp2|dgp3|uniform1d")
        if "tau" in names:
            p.add_argument("--tau", type=float, help="quantile level")
        if "taus" in names:
            p.add_argument("--taus", help="start:stop:step or comma list")
        if "study" in names:
            p.add_argument("--reps", type=int)
            p.add_argument("--seed", type=int, help="master seed (required)")
            p.add_argument("--threads", type=int)
            p.add_argument("--tie-break", choices=TIE_BREAKS)
            p.add_argument("--summary", action="store_true", help="print an aligned table")
        if "nuisance" in names:
            p.add_argument("--nuisance", choices=("analytic", "plugin"))
            p.add_argument("--bandwidth", type=float)
            p.add_argument("--kernel", choices=[k.value for k in nuisance.Kernel])
        if "box" in names:
            p.add_argument("--theta-box", help="lo1,hi1,...,lok,hik")
        p.add_argument("--out-dir", help="directory for output files")
        p.add_argument("--config", help="key=value settings file")

    est = sub.add_parser("estimate", help="exact estimate and corrections for a dataset")
    common(est, "data", "dgp", "tau", "nuisance", "box")
    est.add_argument("--estimator", choices=corrections.ESTIMATORS)
    est.add_argument("--norm", choices=[p.value for p in Norm])
    est.add_argument("--tie-break", choices=TIE_BREAKS)

    sim = sub.add_parser("simulate", help="Monte Carlo bias study")
    common(sim, "dgp", "taus", "study", "nuisance", "box")
    sim.add_argument("--n", type=int)
    sim.add_argument("--estimator", help="comma list of estimators")

    rates = sub.add_parser("rates", help="rate-of-convergence study")
    common(rates, "dgp", "tau", "study", "box")
    rates.add_argument("--ns", help="comma list of sample sizes")

    order = sub.add_parser("orderstat", help="exact vs asymptotic order-statistic bias table")
    common(order, "taus")
    order.add_argument("--n", type=int)

    milp = sub.add_parser("export-milp", help="write the MILP model with SOS1 constraints")
    common(milp, "data", "tau")

    val = sub.add_parser("validate", help="dataset diagnostics")
    common(val, "data")
    return parser


def _settings(args) -> dict:
    """Config file values overridden by explicitly given flags."""
    settings = read_settings(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if key in CONFIG_KEYS and value is not None:
            settings[key] = value
    return settings


def _require(settings: dict, key: str, verb: str):
    if settings.get(key) in (None, ""):
        raise CliError("missing_argument", f"{verb} needs --{key.replace('_', '-')}", EXIT_USAGE)
    return settings[key]


def _out_dir(settings: dict) -> Path:
    out = Path(settings.get("out_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v) -> str:
    return np.array2string(np.asarray(v, dtype=float), precision=10, separator=", ")


# ---------------------------------------------------------------------------
# verbs

def cmd_estimate(args, settings) -> int:
    ds = load_dataset(_require(settings, "data", "estimate"))
    tau = float(_require(settings, "tau", "estimate"))
    ctx = MomentContext(ds, tau)
    estimator = settings.get("estimator", "exact-l1")
    comps = None
    if settings.get("nuisance", "plugin") == "analytic":
        if "dgp" not in settings:
            raise CliError("no_oracle", "analytic nuisance components need --dgp", EXIT_USAGE)
        comps = nuisance.from_truth(analytic_components(DgpId.parse(settings["dgp"]), tau))
    box = parse_box(settings["theta_box"], ds.k) if "theta_box" in settings else None
    bandwidth = float(settings["bandwidth"]) if "bandwidth" in settings else None
    rep = corrections.run_pipeline(ctx, estimator, norm=settings.get("norm", "l1"), components=comps,
                                   kernel=settings.get("kernel", "gaussian"), bandwidth=bandwidth,
                                   tie_break=settings.get("tie_break", "pointwise"), box=box)
    print(f"estimator: {estimator}")
    print(f"theta: {_fmt(rep.theta)}")
    sol = rep.exact
    print(f"exact_{sol.norm.value}: {_fmt(sol.theta)}  subset={list(sol.subset)}  "
          f"objective={sol.objective_value:.6g}  optimal_corners={sol.ties}")
    if rep.components is not None:
        c = rep.components
        print(f"nuisance: {c.provenance}" + (f" (bandwidth {c.bandwidth:.6g})" if c.bandwidth else ""))
        print(f"G: {_fmt(c.G)}")
        print(f"kappa1: {_fmt(c.kappa1)}")
        print(f"Q'vec(Omega)/2: {_fmt(0.5 * c.Q.T @ c.Omega.reshape(-1, order='F'))}")
        print(f"onestep: {_fmt(rep.onestep)}")
        print(f"symmetric: {_fmt(rep.symmetric)}")
        print(f"bias_term: {_fmt(rep.bias)}")
        print(f"bias_corrected: {_fmt(rep.bias_corrected)}")
    return 0


def _study(args, settings, verb) -> StudyConfig:
    _require(settings, "seed", verb)
    _require(settings, "dgp", verb)
    try:
        return study_config(settings)
    except ValueError as exc:
        raise CliError("invalid_config", str(exc), EXIT_CONFIG) from None


def cmd_simulate(args, settings) -> int:
    settings.setdefault("n", 50)
    cfg = _study(args, settings, "simulate")
    table = run_bias_study(cfg)
    path = table.to_csv(_out_dir(settings) / f"bias_{cfg.dgp.value}_{cfg.n}.csv")
    if args.summary:
        print(table.summary())
    print(f"wrote {path}")
    return 0


def cmd_rates(args, settings) -> int:
    _require(settings, "ns", "rates")
    settings.setdefault("tau", 0.5)
    cfg = _study(args, settings, "rates")
    table = run_rate_study(cfg)
    path = table.to_csv(_out_dir(settings) / f"rates_{cfg.dgp.value}.csv")
    if args.summary:
        print(table.summary())
    print(f"wrote {path}")
    return 0


def orderstat_rows(n: int, taus) -> list:
    """One row per tau: ``k``, ``{tau n}`` and exact/asymptotic biases of both corners (NaN when undefined)."""
    rows = []
    for tau in taus:
        k, frac = _floor_product(tau, n)
        row = [tau, k, frac]
        for corner in ("lower", "upper"):
            for kind in ("exact", "asymptotic"):
                try:
                    row.append(uniform_orderstat_bias(n, tau, corner, kind))
                except ValueError:
                    row.append(math.nan)
        rows.append(row)
    return rows


def cmd_orderstat(args, settings) -> int:
    n = int(_require(settings, "n", "orderstat"))
    taus = parse_taus(settings.get("taus", "0.05:0.95:0.05"))
    rows = orderstat_rows(n, taus)
    path = _out_dir(settings) / f"orderstat_{n}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "k", "frac", "lower_exact", "lower_asymptotic", "upper_exact", "upper_asymptotic"])
        for row in rows:
            writer.writerow([repr(float(row[0])), row[1], repr(row[2])] + ["" if math.isnan(v) else repr(v) for v in row[3:]])
    print(f"wrote {path}")
    return 0


def cmd_export_milp(args, settings) -> int:
    ds = load_dataset(_require(settings, "data", "export-milp"))
    tau = float(_require(settings, "tau", "export-milp"))
    text = export_milp_sos(MomentContext(ds, tau))
    if "out_dir" in settings:
        path = _out_dir(settings) / f"milp_{Path(settings['data']).stem}.txt"
        path.write_text(text)
        print(f"wrote {path}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_validate(args, settings) -> int:
    ds = load_dataset(_require(settings, "data", "validate"))
    d = validate(ds)
    print(f"n={ds.n} k={d.k} rank={d.rank} full_rank={d.full_rank} support_bound={d.support_bound:.6g} "
          f"distinct_directions={d.distinct_directions} instrumental={not ds.is_qr}")
    if d.singular_instruments:
        raise CliError("singular_instruments", "E_n[z w'] is rank deficient", EXIT_DATA)
    return 0


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "rates": cmd_rates, "orderstat": cmd_orderstat,
            "export-milp": cmd_export_milp, "validate": cmd_validate}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = _settings(args)
        return COMMANDS[args.verb](args, settings)
    except CliError as exc:
        err = (exc.category, str(exc), exc.code)
    except ConfigError as exc:
        err = ("invalid_config", str(exc), EXIT_CONFIG)
    except DatasetError as exc:
        err = (exc.code, str(exc), EXIT_DATA)
    except (np.linalg.LinAlgError, NoCornerError, SingularDensityError) as exc:
        err = ("numerical", str(exc), EXIT_NUMERIC)
    except (ValueError, OSError) as exc:
        err = ("invalid_argument", str(exc), EXIT_USAGE)
    print(f"error: {err[0]}: {err[1]}", file=sys.stderr)
    return err[2]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
