"""Dataset ingestion, synthetic stand-ins and optimization trace files.

Supported on-disk formats:

libsvm
    One example per line: ``<label> <index>:<value> <index>:<value> ...``.
    Labels are ``0``/``1`` or ``-1``/``+1`` (``0`` maps to ``-1``).  Indices are
    1-based positive integers, strictly increasing within a line.  Blank lines
    and lines starting with ``#`` are skipped; a trailing ``# comment`` on a
    line is ignored.

tables
    Comma separated, first row is a header, ``.`` as decimal point.  Count
    tables have the columns ``e``, ``p``, ``Y``, ``N`` (group label, precinct
    label, stops, arrests) with exactly one row per ``(e, p)`` cell.

traces
    Comma separated with the header ``wall_seconds,step,elbo,selection,g2hat,that,seed``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np
from scipy import sparse

from .errors import DomainError, IngestionError

TRACE_HEADER = ("wall_seconds", "step", "elbo", "selection", "g2hat", "that", "seed")
COUNT_COLUMNS = ("e", "p", "Y", "N")


@dataclass(frozen=True, eq=False)
class ClassificationDataset:
    features: sparse.csr_matrix
    labels: np.ndarray
    planted: Optional[dict] = None

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def dense(self) -> np.ndarray:
        return self.features.toarray()

    def head(self, rows: int) -> "ClassificationDataset":
        return ClassificationDataset(self.features[:rows], self.labels[:rows], self.planted)


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple = ()
    column_means: Optional[np.ndarray] = None
    column_stds: Optional[np.ndarray] = None
    dropped: tuple = ()
    planted: Optional[dict] = None

    def __post_init__(self):
        if self.features.shape[0] != self.targets.shape[0]:
            raise IngestionError("feature and target row counts differ")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def head(self, rows: int) -> "RegressionDataset":
        return RegressionDataset(
            self.features[:rows], self.targets[:rows], self.feature_names,
            self.column_means, self.column_stds, self.dropped, self.planted,
        )


@dataclass(frozen=True, eq=False)
class CountTable:
    """Stops ``Y[e, p]`` and arrests ``N[e, p]`` per group ``e`` and precinct ``p``."""

    Y: np.ndarray
    N: np.ndarray
    groups: tuple = ()
    precincts: tuple = ()
    planted: Optional[dict] = None

    def __post_init__(self):
        if self.Y.shape != self.N.shape or self.Y.ndim != 2:
            raise IngestionError("Y and N must be matrices of the same shape")
        if np.any(self.N < 1):
            raise IngestionError("every N[e, p] must be at least 1")
        if np.any(self.Y < 0):
            raise IngestionError("counts must be nonnegative")

    @property
    def shape(self):
        return self.Y.shape


Dataset = Union[ClassificationDataset, RegressionDataset, CountTable]


def load_libsvm(path) -> ClassificationDataset:
    path = Path(path)
    labels: List[float] = []
    indptr = [0]
    indices: List[int] = []
    values: List[float] = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            labels.append(_parse_label(tokens[0], path, lineno))
            last = 0
            for tok in tokens[1:]:
                idx_s, sep, val_s = tok.partition(":")
                try:
                    if not sep:
                        raise ValueError
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise IngestionError(f"{path}:{lineno}: malformed feature {tok!r}") from None
                if idx <= last:
                    raise IngestionError(f"{path}:{lineno}: feature indices must be increasing and >= 1")
                if not math.isfinite(val):
                    raise IngestionError(f"{path}:{lineno}: non-finite value {tok!r}")
                last = idx
                indices.append(idx - 1)
                values.append(val)
            indptr.append(len(indices))
    if not labels:
        raise IngestionError(f"{path}: no examples")
    dim = max(indices) + 1 if indices else 0
    X = sparse.csr_matrix(
        (np.asarray(values, dtype=float), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(labels), dim),
    )
    return ClassificationDataset(X, np.asarray(labels))


def _parse_label(token, path, lineno) -> float:
    try:
        value = float(token)
    except ValueError:
        raise IngestionError(f"{path}:{lineno}: malformed label {token!r}") from None
    if value == 1.0:
        return 1.0
    if value in (0.0, -1.0):
        return -1.0
    raise IngestionError(f"{path}:{lineno}: label must be 0/1 or -1/+1, got {token!r}")


def _read_csv(path):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            rows.append((lineno, [c.strip() for c in row]))
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    return path, header, rows


def _to_float(cell, path, lineno, column) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise IngestionError(f"{path}:{lineno}: non-numeric cell {cell!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise IngestionError(f"{path}:{lineno}: non-finite cell in column {column!r}")
    return value


def load_table(path, target_column: Optional[str] = None) -> Union[RegressionDataset, CountTable]:
    """Load a delimited table.

    With ``target_column`` the table is a regression dataset (features are
    standardized, constant columns dropped).  Without it the table must carry
    the count columns ``e, p, Y, N`` and is pivoted into a :class:`CountTable`.
    """
    path, header, rows = _read_csv(path)
    if target_column is None:
        missing = [c for c in COUNT_COLUMNS if c not in header]
        if missing:
            raise IngestionError(f"{path}: missing column(s) {', '.join(missing)} for a count table")
        return _pivot_counts(path, header, rows)
    if target_column not in header:
        raise IngestionError(f"{path}: missing target column {target_column!r}")
    t = header.index(target_column)
    names = [h for i, h in enumerate(header) if i != t]
    feats = np.empty((len(rows), len(names)))
    targets = np.empty(len(rows))
    for r, (lineno, row) in enumerate(rows):
        vals = [_to_float(c, path, lineno, header[i]) for i, c in enumerate(row)]
        targets[r] = vals[t]
        feats[r] = [v for i, v in enumerate(vals) if i != t]
    return standardize(feats, targets, names)


def standardize(features, targets, names=None, planted=None) -> RegressionDataset:
    features = np.asarray(features, dtype=float)
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(features.shape[1]))
    means = features.mean(axis=0)
    stds = features.std(axis=0)
    keep = stds > 0
    dropped = tuple(n for n, k in zip(names, keep) if not k)
    scaled = (features[:, keep] - means[keep]) / stds[keep]
    return RegressionDataset(
        scaled, np.asarray(targets, dtype=float),
        tuple(n for n, k in zip(names, keep) if k), means[keep], stds[keep], dropped, planted,
    )


def _pivot_counts(path, header, rows) -> CountTable:
    col = {c: header.index(c) for c in COUNT_COLUMNS}
    cells = {}
    for lineno, row in rows:
        key = (row[col["e"]], row[col["p"]])
        if key in cells:
            raise IngestionError(f"{path}:{lineno}: duplicate cell e={key[0]!r} p={key[1]!r}")
        y = _to_float(row[col["Y"]], path, lineno, "Y")
        n = _to_float(row[col["N"]], path, lineno, "N")
        if y != int(y) or n != int(n):
            raise IngestionError(f"{path}:{lineno}: counts must be integers")
        cells[key] = (int(y), int(n), lineno)
    groups = sorted({k[0] for k in cells}, key=_natural_key)
    precincts = sorted({k[1] for k in cells}, key=_natural_key)
    Y = np.zeros((len(groups), len(precincts)), dtype=np.int64)
    N = np.zeros_like(Y)
    for (e, p), (y, n, lineno) in cells.items():
        if n < 1:
            raise IngestionError(f"{path}:{lineno}: N must be at least 1")
        if y < 0:
            raise IngestionError(f"{path}:{lineno}: Y must be nonnegative")
        Y[groups.index(e), precincts.index(p)] = y
        N[groups.index(e), precincts.index(p)] = n
    if len(cells) != Y.size:
        raise IngestionError(f"{path}: count table has missing (e, p) cells")
    return CountTable(Y, N, tuple(groups), tuple(precincts))


def _natural_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def synth_dataset(kind: str, size: int, seed: int, **options) -> Dataset:
    """Seeded stand-in datasets.

    ``logreg``: ``size`` rows of ``N(0, 1)`` features (``dim``, default 5) with
    labels drawn from a planted logistic model.  ``regression``: ``size`` rows
    from a planted one-hidden-layer ReLU network plus Gaussian noise.
    ``counts``: ``size`` precincts by ``groups`` (default 3) groups drawn from a
    planted hierarchical Poisson model.
    """
    if size < 1:
        raise DomainError("size must be at least 1")
    rng = np.random.default_rng(seed)
    if kind == "logreg":
        dim = int(options.get("dim", 5))
        weights = rng.normal(0.0, 1.0, dim)
        bias = float(rng.normal(0.0, 0.5))
        X = rng.standard_normal((size, dim))
        prob = 1.0 / (1.0 + np.exp(-(bias + X @ weights)))
        y = np.where(rng.random(size) < prob, 1.0, -1.0)
        return ClassificationDataset(sparse.csr_matrix(X), y, {"weights": weights, "bias": bias})
    if kind == "regression":
        dim = int(options.get("dim", 11))
        hidden = int(options.get("hidden", 10))
        noise = float(options.get("noise", 0.5))
        W1 = rng.normal(0.0, 1.0 / math.sqrt(dim), (hidden, dim))
        b1 = rng.normal(0.0, 0.1, hidden)
        W2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden)
        X = rng.standard_normal((size, dim))
        mean = np.maximum(X @ W1.T + b1, 0.0) @ W2
        y = mean + noise * rng.standard_normal(size)
        planted = {"W1": W1, "b1": b1, "W2": W2, "noise": noise}
        return standardize(X, y, planted=planted)
    if kind == "counts":
        groups = int(options.get("groups", 3))
        mu = float(options.get("mu", -1.0))
        sigma_a = float(options.get("sigma_alpha", 0.5))
        sigma_b = float(options.get("sigma_beta", 0.5))
        alpha = rng.normal(0.0, sigma_a, groups)
        beta = rng.normal(0.0, sigma_b, size)
        N = 1 + rng.poisson(float(options.get("arrests", 40.0)), (groups, size))
        rate = np.exp(mu + alpha[:, None] + beta[None, :] + np.log(N))
        Y = rng.poisson(rate)
        planted = {"mu": mu, "sigma_alpha": sigma_a, "sigma_beta": sigma_b,
                   "alpha": alpha, "beta": beta, "rate": rate}
        return CountTable(Y, N, tuple(range(groups)), tuple(range(size)), planted)
    raise DomainError(f"unknown synthetic dataset kind {kind!r}")


@dataclass(frozen=True, eq=False)
class TraceRecord:
    wall_seconds: float
    step: int
    elbo: float
    selection: str
    g2hat: float = float("nan")
    that: float = float("nan")
    seed: int = 0

    def astuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))

    def __eq__(self, other):
        if not isinstance(other, TraceRecord):
            return NotImplemented
        return all(_same(a, b) for a, b in zip(self.astuple(), other.astuple()))

    __hash__ = None


def _same(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


def write_trace(path, records: Iterable[TraceRecord]) -> None:
    records = list(records)
    last = {}
    for rec in records:
        prev = last.get(rec.seed)
        if prev is not None and rec.wall_seconds < prev:
            raise DomainError(
                f"wall_seconds decreased within seed {rec.seed}: {prev} -> {rec.wall_seconds}"
            )
        last[rec.seed] = rec.wall_seconds
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for rec in records:
            writer.writerow([
                repr(float(rec.wall_seconds)), int(rec.step), repr(float(rec.elbo)), rec.selection,
                repr(float(rec.g2hat)), repr(float(rec.that)), int(rec.seed),
            ])


def read_trace(path) -> List[TraceRecord]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != TRACE_HEADER:
            raise IngestionError(f"{path}: unexpected trace header {','.join(header)!r}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(TRACE_HEADER):
                raise IngestionError(f"{path}:{lineno}: expected {len(TRACE_HEADER)} cells")
            try:
                out.append(TraceRecord(
                    float(row[0]), int(row[1]), float(row[2]), row[3],
                    float(row[4]), float(row[5]), int(row[6]),
                ))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
    return out
