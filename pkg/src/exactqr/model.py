"""Core data container, CSV ingestion and dataset diagnostics."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed or degenerate datasets.

    ``location`` carries a human readable row/column pointer when one exists.
    """

    def __init__(self, message: str, location: str | None = None, code: str = "invalid_dataset"):
        self.location = location
        self.code = code
        super().__init__(f"{message} ({location})" if location else message)


@dataclass(frozen=True)
class Dataset:
    """Observations ``(y, w, z)`` of a just-identified quantile moment model.

    ``w`` holds regressors and ``z`` instruments, both ``n x k``. For classical
    quantile regression ``z`` is ``w``.
    """

    y: np.ndarray
    w: np.ndarray
    z: np.ndarray = field(default=None)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 1)
        z = w if self.z is None else np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        if w.shape[0] != y.shape[0]:
            raise DatasetError(f"w has {w.shape[0]} rows but y has {y.shape[0]}")
        if z.shape != w.shape:
            raise DatasetError(f"z shape {z.shape} differs from w shape {w.shape}")
        n, k = w.shape
        if n <= k:
            raise DatasetError(f"n <= k: {n} observations for {k} parameters", code="n_le_k")
        for name, arr in (("y", y), ("w", w), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"non-finite entries in {name}")
        for arr in (y, w, z):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def k(self) -> int:
        return self.w.shape[1]

    @property
    def is_qr(self) -> bool:
        """True when instruments coincide with regressors."""
        return self.z is self.w or np.array_equal(self.z, self.w)

    def with_y(self, y) -> "Dataset":
        return Dataset(y, self.w, None if self.is_qr else self.z)


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")
    return tau


def check_theta(theta, k: int) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (k,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({k},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta has non-finite entries")
    return theta


_W_COL = re.compile(r"^w(\d+)$")
_Z_COL = re.compile(r"^z(\d+)$")


def load_dataset(path: str | Path) -> Dataset:
    """Read a CSV with header ``y,w1..wk[,z1..zk]``.

    Missing ``z`` columns mean ``z = w``.  Error locations count file lines,
    so the header is row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError("empty file", str(path)) from None
        rows = [r for r in reader if any(c.strip() for c in r)]

    if "y" not in header:
        raise DatasetError("missing column 'y'", "header")
    w_cols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _W_COL.match(h)))
    z_cols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _Z_COL.match(h)))
    k = len(w_cols)
    if k == 0:
        raise DatasetError("missing regressor columns w1..wk", "header")
    if [j for j, _ in w_cols] != list(range(1, k + 1)):
        raise DatasetError("regressor columns must be w1..wk without gaps", "header")
    if z_cols and [j for j, _ in z_cols] != list(range(1, k + 1)):
        missing = sorted(set(range(1, k + 1)) - {j for j, _ in z_cols})
        where = f"column z{missing[0]}" if missing else "header"
        raise DatasetError("instrument columns must be z1..zk matching w1..wk", where)
    known = {"y"} | {header[i] for _, i in w_cols} | {header[i] for _, i in z_cols}
    extra = [h for h in header if h not in known]
    if extra:
        raise DatasetError(f"unexpected column '{extra[0]}'", "header")

    yi = header.index("y")
    data = np.empty((len(rows), len(header)))
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DatasetError(f"expected {len(header)} cells, found {len(row)}", f"row {r}")
        for c, cell in enumerate(row):
            try:
                value = float(cell)
            except ValueError:
                raise DatasetError(f"non-numeric cell {cell!r}", f"row {r}, column {header[c]}") from None
            if not math.isfinite(value):
                raise DatasetError(f"non-finite cell {cell!r}", f"row {r}, column {header[c]}")
            data[r - 2, c] = value

    n = data.shape[0]
    if n <= k:
        raise DatasetError(f"n <= k: {n} observations for {k} parameters", str(path), code="n_le_k")
    y = data[:, yi]
    w = data[:, [i for _, i in w_cols]]
    z = data[:, [i for _, i in z_cols]] if z_cols else None
    return Dataset(y, w, z)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` in the CSV schema read by :func:`load_dataset` (17 significant digits)."""
    k = ds.k
    header = ["y"] + [f"w{j}" for j in range(1, k + 1)]
    cols = [ds.y[:, None], ds.w]
    if not ds.is_qr:
        header += [f"z{j}" for j in range(1, k + 1)]
        cols.append(ds.z)
    table = np.hstack(cols)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in table:
            writer.writerow([f"{v:.17g}" for v in row])


@dataclass(frozen=True)
class Diagnostics:
    rank: int
    k: int
    support_bound: float
    distinct_directions: int
    singular_instruments: bool

    @property
    def full_rank(self) -> bool:
        return self.rank == self.k


def validate(ds: Dataset) -> Diagnostics:
    """Rank of ``E_n[z w']``, support bound ``m`` and number of distinct directions of ``w``.

    ``singular_instruments`` is fatal for any Newton-type operation.
    """
    czw = ds.z.T @ ds.w / ds.n
    rank = int(np.linalg.matrix_rank(czw))
    m = float(max(np.linalg.norm(ds.w, axis=1).max(), np.linalg.norm(ds.z, axis=1).max()))
    norms = np.linalg.norm(ds.w, axis=1)
    nz = norms > 0
    directions = ds.w[nz] / norms[nz, None]
    s = len(np.unique(np.round(directions, 12), axis=0)) if directions.size else 0
    return Diagnostics(rank=rank, k=ds.k, support_bound=m, distinct_directions=s,
                       singular_instruments=rank < ds.k)
