"""LibSVM parsing, row normalization and device partitioning."""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .losses import LogisticDevice, QuadraticDevice

__all__ = [
    "DataFormatError",
    "LabeledDataset",
    "Partition",
    "parse_libsvm",
    "load_libsvm",
    "normalize_rows",
    "split",
    "write_manifest",
    "read_manifest",
    "logistic_devices",
    "quadratic_devices",
    "synthetic_a1a",
    "find_a1a",
    "a1a_dataset",
]

log = logging.getLogger(__name__)

A1A_ENV = "MIXFL_A1A"
A1A_SHAPE = (1605, 123)
# one-hot group widths summing to 123, one active feature per group
_A1A_GROUPS = (5, 8, 5, 16, 5, 7, 14, 6, 5, 2, 2, 2, 5, 41)


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    rows: sparse.csr_matrix
    labels: np.ndarray
    zero_rows: tuple = ()
    source: str = ""

    def __post_init__(self):
        self.rows = sparse.csr_matrix(self.rows, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float).ravel()
        if self.rows.shape[0] < 1:
            raise DataFormatError("no data")
        if self.labels.shape[0] != self.rows.shape[0]:
            raise DataFormatError("label count does not match row count")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise DataFormatError("labels must be -1 or +1")

    @property
    def N(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        csr = self.rows.tocsr()
        for arr in (csr.indptr, csr.indices, csr.data, self.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.rows.shape).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class Partition:
    n: int
    m: int
    assignment: np.ndarray  # (n, m) row indices
    mode: str
    seed: int | None
    dropped: tuple = field(default=())

    def device_rows(self, i: int) -> np.ndarray:
        return self.assignment[i]


def _parse_label(tok: str, lineno: int) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise DataFormatError(f"line {lineno}: bad label {tok!r}") from None
    if val == 1.0:
        return 1.0
    if val in (-1.0, 0.0):
        return -1.0
    raise DataFormatError(f"line {lineno}: label {tok!r} is not one of -1, 0, +1")


def parse_libsvm(stream, n_features: int | None = None, source: str = "") -> LabeledDataset:
    """Read ``<label> <idx>:<val> ...`` lines (1-based, strictly increasing indices)."""
    if isinstance(stream, (str, bytes)):
        stream = io.StringIO(stream.decode() if isinstance(stream, bytes) else stream)
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    labels: list[float] = []
    max_idx = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        labels.append(_parse_label(toks[0], lineno))
        prev = 0
        for tok in toks[1:]:
            key, sep, val = tok.partition(":")
            if not sep:
                raise DataFormatError(f"line {lineno}: malformed feature {tok!r}")
            if key == "qid":
                continue
            try:
                idx = int(key)
                v = float(val)
            except ValueError:
                raise DataFormatError(f"line {lineno}: malformed feature {tok!r}") from None
            if idx < 1:
                raise DataFormatError(f"line {lineno}: feature index {idx} < 1")
            if idx <= prev:
                raise DataFormatError(f"line {lineno}: feature indices not strictly increasing at {idx}")
            if not np.isfinite(v):
                raise DataFormatError(f"line {lineno}: non-finite value {val!r}")
            prev = idx
            indices.append(idx - 1)
            values.append(v)
        max_idx = max(max_idx, prev)
        indptr.append(len(indices))
    if not labels:
        raise DataFormatError("no data")
    d = max_idx if n_features is None else int(n_features)
    if d < max_idx:
        raise DataFormatError(f"n_features={d} smaller than largest index {max_idx}")
    rows = sparse.csr_matrix(
        (np.array(values, dtype=float), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(len(labels), max(d, 1)),
    )
    return LabeledDataset(rows, np.array(labels), source=source)


def load_libsvm(path, n_features: int | None = None) -> LabeledDataset:
    path = Path(path)
    with open(path) as fh:
        return parse_libsvm(fh, n_features=n_features, source=str(path))


def normalize_rows(ds: LabeledDataset, target_smoothness: float = 1.0) -> LabeledDataset:
    """Scale rows so every logistic component is ``target_smoothness``-smooth.

    A logistic component with row a has curvature at most ||a||^2/4, so rows
    are rescaled to norm 2*sqrt(target).  Zero rows are left alone and listed
    in ``zero_rows`` of the result.
    """
    if not target_smoothness > 0:
        raise ValueError("target_smoothness must be positive")
    rows = ds.rows.tocsr(copy=True)
    norms = np.sqrt(np.asarray(rows.multiply(rows).sum(axis=1)).ravel())
    zero = np.flatnonzero(norms == 0)
    scale = np.ones_like(norms)
    nz = norms > 0
    scale[nz] = 2.0 * np.sqrt(target_smoothness) / norms[nz]
    rows = sparse.diags(scale) @ rows
    if zero.size:
        log.warning("normalize_rows: %d zero rows left unchanged", zero.size)
    return LabeledDataset(rows.tocsr(), ds.labels.copy(), zero_rows=tuple(int(i) for i in zero), source=ds.source)


def split(ds: LabeledDataset, n: int, mode: str = "homogeneous", seed: int | None = 0) -> Partition:
    """Partition rows into ``n`` equal contiguous chunks.

    homogeneous: seeded shuffle first; heterogeneous: stable sort by label
    (-1 before +1).  The trailing ``N mod n`` rows of the ordering are dropped.
    """
    N = ds.N
    if n < 1:
        raise ValueError("n must be positive")
    if n > N:
        raise ValueError(f"cannot split {N} rows over {n} devices")
    if mode == "homogeneous":
        if seed is None:
            raise ValueError("homogeneous split requires a seed")
        order = np.random.default_rng(seed).permutation(N)
    elif mode == "heterogeneous":
        order = np.argsort(ds.labels, kind="stable")
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    m = N // n
    kept = order[: n * m]
    dropped = tuple(int(i) for i in order[n * m :])
    if dropped:
        log.info("split: dropping %d trailing rows", len(dropped))
    return Partition(n=n, m=m, assignment=kept.reshape(n, m).copy(), mode=mode,
                     seed=seed if mode == "homogeneous" else None, dropped=dropped)


def write_manifest(partition: Partition, fh) -> int:
    count = 0
    for i in range(partition.n):
        for r in partition.assignment[i]:
            fh.write(f"{i}\t{int(r)}\n")
            count += 1
    return count


def read_manifest(fh) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for lineno, line in enumerate(fh, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            dev, row = line.split("\t")
            out.setdefault(int(dev), []).append(int(row))
        except ValueError:
            raise DataFormatError(f"manifest line {lineno}: expected 'device<TAB>row'") from None
    return out


def logistic_devices(ds: LabeledDataset, partition: Partition, mu: float) -> list[LogisticDevice]:
    dense = ds.rows.toarray()
    return [LogisticDevice(dense[idx], ds.labels[idx], mu) for idx in partition.assignment]


def quadratic_devices(n: int, d: int, m: int = 1, seed: int = 0, spread: float = 1.0,
                      mu: float = 0.0, scales=None) -> list[QuadraticDevice]:
    """Random quadratic devices; each device's centers are jittered around a device mean."""
    rng = np.random.default_rng(seed)
    means = spread * rng.standard_normal((n, d))
    out = []
    for i in range(n):
        C = means[i] + 0.5 * spread * rng.standard_normal((m, d))
        s = None if scales is None else np.asarray(scales, dtype=float)
        out.append(QuadraticDevice(C, s, mu))
    return out


def synthetic_a1a(seed: int = 0) -> LabeledDataset:
    """Deterministic stand-in with the a1a shape: 1605 rows, 123 binary features.

    Rows are one-hot encodings of 14 categorical attributes (an attribute is
    missing with small probability); labels come from a noisy linear rule with
    about a quarter positives.
    """
    rng = np.random.default_rng(seed)
    N, d = A1A_SHAPE
    offsets = np.concatenate([[0], np.cumsum(_A1A_GROUPS)[:-1]])
    X = np.zeros((N, d))
    for off, width in zip(offsets, _A1A_GROUPS):
        probs = rng.dirichlet(np.full(width, 0.7))
        cats = rng.choice(width, size=N, p=probs)
        present = rng.random(N) > 0.02
        X[np.flatnonzero(present), off + cats[present]] = 1.0
    w = rng.standard_normal(d) * 1.5
    score = X @ w + 0.8 * rng.standard_normal(N)
    labels = np.where(score > np.quantile(score, 0.754), 1.0, -1.0)
    return LabeledDataset(sparse.csr_matrix(X), labels, source="synthetic-a1a")


def find_a1a() -> Path | None:
    candidates = []
    if os.environ.get(A1A_ENV):
        candidates.append(Path(os.environ[A1A_ENV]))
    candidates += [Path("data/a1a"), Path(__file__).resolve().parents[2] / "data" / "a1a"]
    for c in candidates:
        if c.is_file():
            return c
    return None


def a1a_dataset(seed: int = 0) -> LabeledDataset:
    """The real a1a file when available, else the synthetic stand-in."""
    path = find_a1a()
    if path is not None:
        return load_libsvm(path, n_features=A1A_SHAPE[1])
    log.warning("a1a not found (set %s); using synthetic stand-in", A1A_ENV)
    return synthetic_a1a(seed)
