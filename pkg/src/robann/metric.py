"""Points, datasets, closed balls and the brute-force ground truth."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Metric",
    "Point",
    "Dataset",
    "ProblemParams",
    "Verdict",
    "distance",
    "ball",
    "oracle_ann_verdicts",
    "pack_bits",
    "read_dataset",
    "write_dataset",
]


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a ``(n, d)`` 0/1 array into ``(n, ceil(d/64))`` uint64 words."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    n, d = bits.shape
    n_words = max(1, -(-d // 64))
    packed = np.packbits(bits, axis=1, bitorder="little")
    out = np.zeros((n, n_words * 8), dtype=np.uint8)
    out[:, : packed.shape[1]] = packed
    return out.view(np.uint64)


@dataclass(frozen=True)
class Metric:
    """Hamming cube ``{0,1}^dim`` when ``p is None``, otherwise ``(R^dim, l_p)``."""

    dim: int
    p: float | None = None

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        if self.p is not None and not self.p >= 1:
            raise ValueError(f"p must be >= 1, got {self.p}")

    @classmethod
    def hamming(cls, dim: int) -> "Metric":
        return cls(int(dim), None)

    @classmethod
    def lp(cls, dim: int, p: float = 2.0) -> "Metric":
        return cls(int(dim), float(p))

    @property
    def is_hamming(self) -> bool:
        return self.p is None

    @property
    def mode(self) -> str:
        return "hamming" if self.p is None else f"lp:{_fmt(self.p)}"

    @property
    def dtype(self):
        return np.uint8 if self.p is None else np.float64

    def check(self, X, *, ndim: int = 2) -> np.ndarray:
        """Validate and coerce points (2-D) or a single point (``ndim=1``)."""
        arr = np.asarray(X)
        if ndim == 1:
            if arr.ndim != 1:
                raise ValueError(f"expected a single point, got shape {arr.shape}")
            if arr.shape[0] != self.dim:
                raise ValueError(f"point has dim {arr.shape[0]}, metric has dim {self.dim}")
        else:
            if arr.ndim == 1 and arr.size == 0:
                arr = arr.reshape(0, self.dim)
            if arr.ndim != 2:
                raise ValueError(f"expected a 2-D array of points, got shape {arr.shape}")
            if arr.shape[1] != self.dim:
                raise ValueError(f"points have dim {arr.shape[1]}, metric has dim {self.dim}")
        if self.p is None:
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ValueError("Hamming coordinates must be exactly 0 or 1")
            return arr.astype(np.uint8, copy=False)
        arr = arr.astype(np.float64, copy=False)
        if not np.isfinite(arr).all():
            raise ValueError("l_p coordinates must be finite")
        return arr

    def distances(self, X: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Distances from every row of ``X`` to ``q`` (no validation)."""
        if X.shape[0] == 0:
            return np.zeros(0)
        if self.p is None:
            return np.bitwise_count(pack_bits(X) ^ pack_bits(q[None, :])).sum(axis=1).astype(np.float64)
        diff = np.abs(X - q[None, :])
        if self.p == 1:
            return diff.sum(axis=1)
        if self.p == 2:
            return np.sqrt((diff * diff).sum(axis=1))
        if math.isinf(self.p):
            return diff.max(axis=1)
        return (diff**self.p).sum(axis=1) ** (1.0 / self.p)

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(self.distances(np.asarray(a)[None, :], np.asarray(b))[0])


def _fmt(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


@dataclass(frozen=True, eq=False)
class Point:
    coords: np.ndarray
    p: float | None = None

    def __post_init__(self):
        coords = Metric(len(self.coords), self.p).check(self.coords, ndim=1).copy()
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @classmethod
    def hamming(cls, bits) -> "Point":
        if isinstance(bits, str):
            bits = [int(ch) for ch in bits]
        return cls(np.asarray(bits), None)

    @classmethod
    def lp(cls, x, p: float = 2.0) -> "Point":
        return cls(np.asarray(x, dtype=np.float64), float(p))

    @property
    def dim(self) -> int:
        return int(self.coords.shape[0])

    @property
    def metric(self) -> Metric:
        return Metric(self.dim, self.p)

    def __eq__(self, other):
        return (
            isinstance(other, Point)
            and self.p == other.p
            and np.array_equal(self.coords, other.coords)
        )

    def __hash__(self):
        return hash((self.p, self.coords.tobytes()))


def distance(a: Point, b: Point) -> float:
    """Hamming count or ``l_p`` distance; mismatched dim or mode raises."""
    if a.p != b.p:
        raise ValueError(f"mode mismatch: {a.metric.mode} vs {b.metric.mode}")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return a.metric.distance(a.coords, b.coords)


class Dataset:
    """Ordered points with stable ids; a deleted id is never reused.

    ids are row positions in insertion order, so ``fit(X)`` assigns
    ``0..n-1`` and later inserts continue from ``n``.
    """

    def __init__(self, metric: Metric, points=None):
        self.metric = metric
        self._X = np.zeros((0, metric.dim), dtype=metric.dtype)
        self._alive = np.zeros(0, dtype=bool)
        self._size = 0
        if points is not None:
            X = metric.check(points)
            self._X = X.copy()
            self._alive = np.ones(len(X), dtype=bool)
            self._size = len(X)

    def __len__(self) -> int:
        return int(self._alive[: self._size].sum())

    @property
    def n_allocated(self) -> int:
        return self._size

    @property
    def ids(self) -> np.ndarray:
        return np.flatnonzero(self._alive[: self._size])

    @property
    def points(self) -> np.ndarray:
        return self._X[: self._size][self._alive[: self._size]]

    def is_live(self, id_: int) -> bool:
        return 0 <= id_ < self._size and bool(self._alive[id_])

    def point(self, id_: int) -> np.ndarray:
        if not self.is_live(id_):
            raise KeyError(f"id {id_} is not live")
        return self._X[id_]

    def insert(self, x) -> int:
        x = self.metric.check(x, ndim=1)
        if self._size == len(self._X):
            cap = max(8, 2 * len(self._X))
            X = np.zeros((cap, self.metric.dim), dtype=self.metric.dtype)
            X[: self._size] = self._X[: self._size]
            alive = np.zeros(cap, dtype=bool)
            alive[: self._size] = self._alive[: self._size]
            self._X, self._alive = X, alive
        id_ = self._size
        self._X[id_] = x
        self._alive[id_] = True
        self._size += 1
        return id_

    def delete(self, id_: int) -> None:
        if not self.is_live(id_):
            raise KeyError(f"id {id_} is not live")
        self._alive[id_] = False

    def copy(self) -> "Dataset":
        out = Dataset(self.metric)
        out._X = self._X.copy()
        out._alive = self._alive.copy()
        out._size = self._size
        return out

    def distances(self, q) -> tuple[np.ndarray, np.ndarray]:
        """``(ids, distances)`` of all live points to ``q``."""
        q = self.metric.check(q, ndim=1)
        ids = self.ids
        return ids, self.metric.distances(self._X[ids], q)

    def ball(self, q, radius: float) -> set[int]:
        ids, dist = self.distances(q)
        return set(ids[dist <= radius].tolist())


def ball(ds: Dataset, q, radius: float) -> set[int]:
    """Ids of live points at distance ``<= radius`` from ``q`` (closed ball)."""
    if isinstance(q, Point):
        q = q.coords
    return ds.ball(q, radius)


@dataclass(frozen=True)
class ProblemParams:
    """``(c, r)``-ANN instance parameters shared by every searcher."""

    c: float
    r: float
    Q: int = 1
    delta: float = 0.0025
    p: float | None = None

    def __post_init__(self):
        if not self.c > 1:
            raise ValueError(f"c must be > 1, got {self.c}")
        if not self.r > 0:
            raise ValueError(f"r must be > 0, got {self.r}")
        if int(self.Q) != self.Q or self.Q < 1:
            raise ValueError(f"Q must be a positive integer, got {self.Q}")
        if not 0 < self.delta <= 0.0025:
            raise ValueError(f"delta must lie in (0, 0.0025], got {self.delta}")
        if self.p is not None and not self.p >= 1:
            raise ValueError(f"p must be >= 1, got {self.p}")

    @property
    def cr(self) -> float:
        return self.c * self.r


@dataclass(frozen=True)
class Verdict:
    r_nonempty: bool
    cr_nonempty: bool
    cr_ids: frozenset = field(default_factory=frozenset)

    def ann_correct(self, answer) -> bool:
        """A returned id must lie in the cr-ball; ``None`` (bottom) needs an empty r-ball."""
        if answer is None:
            return not self.r_nonempty
        return int(answer) in self.cr_ids

    def decision_correct(self, bit: int) -> bool:
        if bit:
            return self.cr_nonempty
        return not self.r_nonempty


def oracle_ann_verdicts(ds: Dataset, q, params: ProblemParams) -> Verdict:
    if isinstance(q, Point):
        q = q.coords
    ids, dist = ds.distances(q)
    cr_ids = frozenset(ids[dist <= params.cr].tolist())
    return Verdict(bool((dist <= params.r).any()), bool(cr_ids), cr_ids)


def _parse_mode(token: str) -> float | None:
    if token == "hamming":
        return None
    if token.startswith("lp:"):
        return float(token[3:])
    raise ValueError(f"unknown mode {token!r}; expected 'hamming' or 'lp:<p>'")


def read_dataset(source) -> Dataset:
    """Parse the ``mode dim n`` text format from a path or file object."""
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            return read_dataset(fh)
    lines = [ln for ln in source.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty dataset file")
    head = lines[0].split()
    if len(head) != 3:
        raise ValueError(f"header must be 'mode dim n', got {lines[0]!r}")
    p = _parse_mode(head[0])
    dim, n = int(head[1]), int(head[2])
    if len(lines) - 1 != n:
        raise ValueError(f"header declares {n} points, found {len(lines) - 1}")
    metric = Metric(dim, p)
    rows = [ln.split() for ln in lines[1:]]
    for i, row in enumerate(rows):
        if len(row) != dim:
            raise ValueError(f"point {i} has {len(row)} coordinates, expected {dim}")
    if p is None:
        X = np.array([[int(v) for v in row] for row in rows], dtype=np.int64).reshape(n, dim)
    else:
        X = np.array([[float(v) for v in row] for row in rows], dtype=np.float64).reshape(n, dim)
    return Dataset(metric, X)


def write_dataset(ds: Dataset, target=None) -> str | None:
    """Serialize live points; returns the text when ``target`` is None."""
    buf = io.StringIO()
    pts = ds.points
    buf.write(f"{ds.metric.mode} {ds.metric.dim} {len(pts)}\n")
    for row in pts:
        if ds.metric.is_hamming:
            buf.write(" ".join(str(int(v)) for v in row))
        else:
            buf.write(" ".join(repr(float(v)) for v in row))
        buf.write("\n")
    text = buf.getvalue()
    if target is None:
        return text
    if isinstance(target, (str, os.PathLike)):
        with open(target, "w") as fh:
            fh.write(text)
    else:
        target.write(text)
    return None
