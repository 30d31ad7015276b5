"""LIBSVM ingestion, label mapping and column-wise partitioning into party shards."""
from __future__ import annotations

import gzip
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np
import scipy.linalg
import scipy.sparse as sp

EIGH_MAX_DIM = 512
GRAM_RTOL = 1e-8
GRAM_MAX_ITER = 10_000


class LibsvmParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class GramIterationError(RuntimeError):
    """Power iteration did not reach tolerance; ``best`` holds (sigma_min, sigma_max)."""

    def __init__(self, msg: str, best: tuple[float, float]):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class LabeledDataset:
    features: sp.csr_matrix
    labels: np.ndarray
    raw_labels: tuple = ()
    label_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on the sample count")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must lie in {-1, +1}")
        if not np.all(np.isfinite(self.features.data)):
            raise ValueError("non-finite feature value")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def dense(self) -> np.ndarray:
        return self.features.toarray()

    def head(self, n: int) -> "LabeledDataset":
        """First ``n`` rows, keeping the column count and label map."""
        return LabeledDataset(
            self.features[:n].tocsr(), self.labels[:n].copy(),
            tuple(self.raw_labels[:n]), dict(self.label_map),
        )

    def with_n_features(self, d: int) -> "LabeledDataset":
        if d < self.n_features and self.features[:, d:].nnz:
            raise ValueError(f"cannot shrink to {d} features: column index >= {d} in use")
        X = self.features
        if d > X.shape[1]:
            X = sp.hstack([X, sp.csr_matrix((X.shape[0], d - X.shape[1]))]).tocsr()
        else:
            X = X[:, :d].tocsr()
        return LabeledDataset(X, self.labels, self.raw_labels, dict(self.label_map))


@dataclass(frozen=True)
class PartitionSpec:
    boundaries: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        if not self.boundaries:
            raise ValueError("a partition needs at least one party")
        if any(b < 1 for b in self.boundaries):
            raise ValueError(f"every party needs >= 1 column, got {self.boundaries}")

    @property
    def n_parties(self) -> int:
        return len(self.boundaries)

    @property
    def total(self) -> int:
        return sum(self.boundaries)

    def offsets(self) -> list[int]:
        return [0, *np.cumsum(self.boundaries).tolist()]


@dataclass(frozen=True, eq=False)
class PartyShard:
    """One party's dense feature block ``N x d_m`` with lazily cached Gram data."""

    party_id: int
    block: np.ndarray
    col_offset: int = 0
    zero_rows: tuple[int, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        block = np.ascontiguousarray(self.block, dtype=np.float64)
        block.setflags(write=False)
        object.__setattr__(self, "block", block)

    @property
    def n_samples(self) -> int:
        return self.block.shape[0]

    @property
    def width(self) -> int:
        return self.block.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        g = self.block.T @ self.block
        g = 0.5 * (g + g.T)
        g.setflags(write=False)
        return g

    @cached_property
    def extremes(self) -> tuple[float, float]:
        return gram_extremes(self)

    @property
    def sigma_min(self) -> float:
        return self.extremes[0]

    @property
    def sigma_max(self) -> float:
        return self.extremes[1]


# ---------------------------------------------------------------- parsing

def parse_libsvm(stream: TextIO | Iterable[str], n_features: int | None = None,
                 label_map: dict | None = None) -> LabeledDataset:
    """Parse ``label idx:val ...`` lines (1-based, strictly ascending indices).

    ``n_features`` forces the column count (to align train/test files that omit
    trailing all-zero columns).  ``label_map`` reuses a raw->{-1,+1} mapping from
    another file; otherwise :func:`relabel` is applied.
    """
    indptr, indices, data, raw = [0], [], [], []
    max_idx = 0
    for lineno, line in enumerate(stream, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(lineno, f"bad label {tokens[0]!r}") from None
        if not math.isfinite(label):
            raise LibsvmParseError(lineno, "non-finite label")
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LibsvmParseError(lineno, f"malformed token {tok!r}")
            try:
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise LibsvmParseError(lineno, f"malformed token {tok!r}") from None
            if idx < 1:
                raise LibsvmParseError(lineno, f"index {idx} < 1")
            if idx <= prev:
                raise LibsvmParseError(lineno, f"index {idx} not ascending after {prev}")
            if not math.isfinite(val):
                raise LibsvmParseError(lineno, f"non-finite value in {tok!r}")
            prev = idx
            indices.append(idx - 1)
            data.append(val)
        max_idx = max(max_idx, prev)
        indptr.append(len(indices))
        raw.append(label)

    d = max_idx if n_features is None else int(n_features)
    if d < max_idx:
        raise ValueError(f"forced n_features={d} but index {max_idx} present")
    X = sp.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64),
         np.asarray(indptr, dtype=np.int64)),
        shape=(len(raw), d),
    )
    raw_arr = np.asarray(raw, dtype=np.float64)
    if label_map is not None:
        try:
            labels = np.array([label_map[r] for r in raw], dtype=np.float64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} missing from label map {label_map}") from None
        mapping = dict(label_map)
    elif raw and set(raw) <= {-1.0, 1.0}:
        labels, mapping = raw_arr.copy(), {-1.0: -1.0, 1.0: 1.0}
    else:
        labels, mapping = relabel(raw_arr)
    return LabeledDataset(X, labels, tuple(raw), mapping)


def load_libsvm(path: str | Path, n_features: int | None = None,
                label_map: dict | None = None, max_rows: int | None = None) -> LabeledDataset:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt") as fh:
        lines = fh if max_rows is None else _take_rows(fh, max_rows)
        return parse_libsvm(lines, n_features=n_features, label_map=label_map)


def _take_rows(lines, n):
    taken = 0
    for line in lines:
        if taken >= n:
            return
        if line.split("#", 1)[0].strip():
            taken += 1
        yield line


def to_libsvm(dataset: LabeledDataset) -> str:
    """Serialise with the raw labels; values use ``repr`` so parsing round-trips exactly."""
    out = io.StringIO()
    X = dataset.features
    raw = dataset.raw_labels or tuple(dataset.labels)
    for i in range(dataset.n_samples):
        lo, hi = X.indptr[i], X.indptr[i + 1]
        parts = [_fmt_label(raw[i])]
        parts += [f"{j + 1}:{float(v)!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi])]
        out.write(" ".join(parts) + "\n")
    return out.getvalue()


def _fmt_label(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def relabel(raw_labels) -> tuple[np.ndarray, dict]:
    """Map exactly two raw values to {-1, +1}: the smaller to -1."""
    raw = np.asarray(raw_labels, dtype=np.float64)
    values = np.unique(raw)
    if len(values) != 2:
        raise ValueError(f"expected exactly two distinct labels, found {len(values)}: {values[:5]}")
    lo, hi = float(values[0]), float(values[1])
    return np.where(raw == hi, 1.0, -1.0), {lo: -1.0, hi: 1.0}


# ---------------------------------------------------------- partitioning

def vertical_split(dataset: LabeledDataset, spec: PartitionSpec) -> list[PartyShard]:
    if spec.total != dataset.n_features:
        raise ValueError(
            f"partition widths sum to {spec.total} but the dataset has {dataset.n_features} features"
        )
    dense = dataset.dense()
    offs = spec.offsets()
    return [
        PartyShard(m, dense[:, offs[m]:offs[m + 1]].copy(), col_offset=offs[m])
        for m in range(spec.n_parties)
    ]


def normalize_rows(shard: PartyShard) -> PartyShard:
    """Rescale each nonzero row to unit l2 norm; all-zero rows are kept and listed in ``zero_rows``."""
    norms = np.linalg.norm(shard.block, axis=1)
    zero = norms == 0.0
    scale = np.where(zero, 1.0, norms)
    return PartyShard(shard.party_id, shard.block / scale[:, None], shard.col_offset,
                      tuple(np.flatnonzero(zero).tolist()))


def normalize_dataset_rows(dataset: LabeledDataset) -> LabeledDataset:
    """Whole-row normalisation across all parties (the LIBSVM-preprocessing reading)."""
    X = dataset.features.tocsr(copy=True)
    norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
    scale = np.where(norms == 0.0, 1.0, norms)
    X = sp.diags(1.0 / scale) @ X
    return LabeledDataset(X.tocsr(), dataset.labels, dataset.raw_labels, dict(dataset.label_map))


# ------------------------------------------------------------ spectrum

def gram_extremes(shard: PartyShard) -> tuple[float, float]:
    """Smallest and largest eigenvalue of ``block.T @ block``.

    Dense symmetric eigensolve up to ``EIGH_MAX_DIM`` columns, otherwise power
    iteration for the top eigenvalue and shifted inverse iteration for the
    bottom one.
    """
    if shard.block.size == 0:
        raise ValueError("empty shard block")
    G = shard.gram
    if G.shape[0] <= EIGH_MAX_DIM:
        ev = np.linalg.eigvalsh(G)
        lo, hi = float(ev[0]), float(ev[-1])
        return max(lo, 0.0), max(hi, max(lo, 0.0))
    return _iterative_extremes(G)


def _settled(prev2: float, prev: float, new: float, scale: float) -> bool:
    """Stop test for a geometrically converging Rayleigh-quotient sequence.

    Besides a small last step, the step ratio is used to extrapolate the
    remaining distance to the limit; slow convergence (ratio near 1) keeps
    the iteration going even when single steps are tiny.
    """
    d1, d2 = prev - prev2, new - prev
    # a decade of margin: the extrapolated tail is an estimate
    tol = 0.1 * GRAM_RTOL * scale
    if abs(d2) > tol:
        return False
    if d2 == 0.0:
        return True
    if d1 == 0.0 or d2 / d1 < 0.0:
        return False
    q = min(d2 / d1, 1.0 - 1e-12)
    return abs(d2) * q / (1.0 - q) <= tol


def _iterative_extremes(G: np.ndarray, seed: int = 0) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    n = G.shape[0]

    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    hist = [float(v @ G @ v)] * 2
    for it in range(GRAM_MAX_ITER):
        w = G @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0, 0.0
        v = w / nrm
        new = float(v @ G @ v)
        done = it > 0 and _settled(hist[-2], hist[-1], new, abs(new))
        hist = [hist[-1], new]
        if done:
            break
    else:
        raise GramIterationError("power iteration did not converge", (0.0, hist[-1]))
    hi = hist[-1]

    # inverse iteration on G + tau I; tau keeps the factorisation defined for singular G
    tau = 1e-10 * hi
    factor = scipy.linalg.cho_factor(G + tau * np.eye(n), lower=True)
    u = rng.standard_normal(n)
    u /= np.linalg.norm(u)
    hist = [float(u @ G @ u)] * 2
    for it in range(GRAM_MAX_ITER):
        w = scipy.linalg.cho_solve(factor, u)
        u = w / np.linalg.norm(w)
        new = float(u @ G @ u)
        done = it > 0 and _settled(hist[-2], hist[-1], new, max(abs(new), tau))
        hist = [hist[-1], new]
        if done:
            break
    else:
        raise GramIterationError("inverse iteration did not converge", (max(hist[-1], 0.0), hi))
    lo = max(hist[-1], 0.0)
    return lo, max(hi, lo)
