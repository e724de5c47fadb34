"""Bit-sampling LSH with OR-of-ANDs amplification.

Each of the ``L`` tables concatenates ``k`` sampled coordinates. A table is
stored as a bucket label per point (the packed ``k``-bit string), so a
bucket is the set of live rows sharing a label and candidate lookup is a
vectorized label comparison.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import answer_code, check_hamming_fit, check_queries, check_query
from .budget import TIMEOUT, BudgetExhausted, WorkBudget
from .metric import Dataset, Metric, ProblemParams, pack_bits

__all__ = [
    "RHO_FUNCTIONS",
    "LshParams",
    "AmplifiedLshIndex",
    "ClassicLSH",
    "bit_sampling_probs",
    "bit_sampling_rho",
    "derive_params",
    "success_probability",
]

RHO_FUNCTIONS = {
    "hamming_opt": lambda c: 1.0 / (2.0 * c - 1.0),
    "l2_opt": lambda c: 1.0 / (2.0 * c * c - 1.0),
    "bit_sampling": lambda c: 1.0 / c,
}


def bit_sampling_probs(d: int, r: float, c: float) -> tuple[float, float]:
    """Collision probabilities ``(1 - r/d, 1 - cr/d)`` of one sampled bit."""
    if not 0 < r < d:
        raise ValueError(f"need 0 < r < d, got r={r}, d={d}")
    if c * r > d:
        raise ValueError(f"cr={c * r} exceeds d={d}: far-pair collision probability would be negative")
    return 1.0 - r / d, 1.0 - c * r / d


def bit_sampling_rho(d: int, r: float, c: float) -> float:
    p1, p2 = bit_sampling_probs(d, r, c)
    if p2 == 0.0:
        return 0.0
    return math.log(1.0 / p1) / math.log(1.0 / p2)


@dataclass(frozen=True)
class LshParams:
    k_concat: int
    L_tables: int
    p1: float
    p2: float
    rho: float
    seed: int = 0

    def __post_init__(self):
        if self.k_concat < 1 or self.L_tables < 1:
            raise ValueError("k_concat and L_tables must be >= 1")
        if not 0 <= self.p2 < self.p1 <= 1:
            raise ValueError(f"need p1 > p2, got p1={self.p1}, p2={self.p2}")
        if not 0 <= self.rho < 1:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")


def derive_params(
    params: ProblemParams,
    n: int,
    d: int,
    boost: float = 1.0,
    *,
    seed: int = 0,
    rho_mode: str = "exact",
    n_tables: int | None = None,
) -> LshParams:
    """``k = ceil(log_{1/p2} n)``, ``L = ceil(n^rho * max(1, boost))``, both clamped to 1.

    ``rho_mode="exact"`` uses ``log(1/p1)/log(1/p2)`` of the sampled-bit
    family; any key of :data:`RHO_FUNCTIONS` sizes ``L`` with that idealized
    exponent instead.
    """
    p1, p2 = bit_sampling_probs(d, params.r, params.c)
    if rho_mode == "exact":
        rho = bit_sampling_rho(d, params.r, params.c)
    else:
        rho = RHO_FUNCTIONS[rho_mode](params.c)
    n = max(int(n), 1)
    if p2 == 0.0:
        k = 1
    else:
        k = max(1, math.ceil(math.log(n) / math.log(1.0 / p2) - 1e-12))
    if n_tables is None:
        L = max(1, math.ceil(n**rho * max(1.0, boost) - 1e-9))
    else:
        L = int(n_tables)
    return LshParams(k, L, p1, p2, rho, int(seed))


def success_probability(p1: float, k: int, L: int) -> float:
    """Chance that a pair colliding per bit w.p. ``p1`` shares at least one table."""
    return 1.0 - (1.0 - p1**k) ** L


_MAGIC = b"RBANNLSH"
_VERSION = 1
_HEADER = struct.Struct("<8sHIIIdddQQQ")


class AmplifiedLshIndex:
    """``L`` tables keyed by ``k`` sampled coordinates each (with replacement)."""

    def __init__(self, params: LshParams, metric: Metric):
        if not metric.is_hamming:
            raise ValueError("bit-sampling LSH needs a Hamming metric")
        self.params = params
        self.metric = metric
        rng = np.random.Generator(np.random.Philox(key=_coord_key(params.seed)))
        self.coords = rng.integers(0, metric.dim, size=(params.L_tables, params.k_concat), dtype=np.int64)
        self._kw = -(-params.k_concat // 64)
        self._size = 0
        self._bits = np.zeros((0, metric.dim), dtype=np.uint8)
        self._words = np.zeros((0, -(-metric.dim // 64)), dtype=np.uint64)
        self._keys = np.zeros((params.L_tables, self._kw, 0), dtype=np.uint64)
        self._ids = np.zeros(0, dtype=np.int64)
        self._alive = np.zeros(0, dtype=bool)
        self._row_of: dict[int, int] = {}
        self._next_id = 0

    @classmethod
    def build(cls, ds: Dataset, params: LshParams) -> "AmplifiedLshIndex":
        idx = cls(params, ds.metric)
        idx._append(ds.points, ds.ids)
        idx._next_id = ds.n_allocated
        return idx

    @classmethod
    def from_points(cls, X: np.ndarray, ids, params: LshParams, metric: Metric) -> "AmplifiedLshIndex":
        idx = cls(params, metric)
        ids = np.asarray(ids, dtype=np.int64)
        idx._append(np.asarray(X, dtype=np.uint8), ids)
        idx._next_id = int(ids.max()) + 1 if len(ids) else 0
        return idx

    @property
    def L(self) -> int:
        return self.params.L_tables

    @property
    def k(self) -> int:
        return self.params.k_concat

    def __len__(self) -> int:
        return len(self._row_of)

    @property
    def ids(self) -> np.ndarray:
        return self._ids[: self._size][self._alive[: self._size]]

    def hash_points(self, X: np.ndarray) -> np.ndarray:
        """Bucket labels, shape ``(L, key_words, n)``."""
        X = np.asarray(X, dtype=np.uint8)
        n = X.shape[0]
        if n == 0:
            return np.zeros((self.L, self._kw, 0), dtype=np.uint64)
        sel = X[:, self.coords]
        packed = np.packbits(sel, axis=2, bitorder="little")
        buf = np.zeros((n, self.L, self._kw * 8), dtype=np.uint8)
        buf[:, :, : packed.shape[2]] = packed
        return np.ascontiguousarray(buf.view(np.uint64).transpose(1, 2, 0))

    def _append(self, X: np.ndarray, ids: np.ndarray) -> None:
        m = len(X)
        if m == 0:
            return
        need = self._size + m
        if need > len(self._ids):
            cap = max(need, 2 * len(self._ids), 8)
            self._bits = _grow(self._bits, cap)
            self._words = _grow(self._words, cap)
            self._ids = _grow(self._ids, cap)
            self._alive = _grow(self._alive, cap)
            keys = np.zeros((self.L, self._kw, cap), dtype=np.uint64)
            keys[:, :, : self._size] = self._keys[:, :, : self._size]
            self._keys = keys
        s = slice(self._size, need)
        self._bits[s] = X
        self._words[s] = pack_bits(X)
        self._ids[s] = ids
        self._alive[s] = True
        self._keys[:, :, s] = self.hash_points(X)
        for row, id_ in zip(range(self._size, need), ids.tolist()):
            if id_ in self._row_of:
                raise ValueError(f"duplicate id {id_}")
            self._row_of[id_] = row
        self._size = need

    def insert(self, pt, id_: int | None = None) -> int:
        """Hash one point into every table; returns its id."""
        pt = self.metric.check(pt, ndim=1)
        if id_ is None:
            id_ = self._next_id
        self._append(pt[None, :], np.array([id_], dtype=np.int64))
        self._next_id = max(self._next_id, int(id_) + 1)
        return int(id_)

    def delete(self, id_: int) -> None:
        row = self._row_of.pop(int(id_), None)
        if row is None:
            raise KeyError(f"id {id_} is not live in this index")
        self._alive[row] = False

    def point(self, id_: int) -> np.ndarray:
        return self._bits[self._row_of[int(id_)]]

    def collision_mask(self, q: np.ndarray) -> np.ndarray:
        """Boolean ``(L, rows)``: table ``t`` puts row ``j`` in the query's bucket."""
        qk = self.hash_points(q[None, :])[:, :, 0]
        keys = self._keys[:, :, : self._size]
        if self._kw == 1:
            mask = keys[:, 0, :] == qk[:, 0, None]
        else:
            mask = (keys == qk[:, :, None]).all(axis=1)
        mask &= self._alive[None, : self._size]
        return mask

    def row_distances(self, rows: np.ndarray, q: np.ndarray) -> np.ndarray:
        qw = pack_bits(q[None, :])
        return np.bitwise_count(self._words[rows] ^ qw).sum(axis=1)

    def candidates(self, q) -> list[tuple[int, int]]:
        """``(id, collision_count)`` for every id sharing a bucket with ``q``, by id."""
        q = self.metric.check(q, ndim=1)
        counts = self.collision_mask(q).sum(axis=0)
        rows = np.flatnonzero(counts)
        out = sorted(zip(self._ids[rows].tolist(), counts[rows].tolist()))
        return [(int(i), int(c)) for i, c in out]

    def classic_query(self, q, radius: float, budget: WorkBudget | None = None):
        """First id within ``radius`` in table-major, then bucket, order; ``None`` if none.

        Charges ``L`` hash evaluations plus one per distinct candidate scanned.
        Returns :data:`TIMEOUT` when ``budget`` runs out.
        """
        q = self.metric.check(q, ndim=1)
        budget = budget if budget is not None else WorkBudget()
        try:
            budget.charge(self.L)
            mask = self.collision_mask(q)
            tables, rows = np.nonzero(mask)
            if len(rows) == 0:
                return None
            uniq = np.unique(rows)
            near_rows = uniq[self.row_distances(uniq, q) <= radius]
            hit = np.isin(rows, near_rows)
            if not hit.any():
                budget.charge(len(uniq))
                return None
            pos = int(np.argmax(hit))
            budget.charge(len(np.unique(rows[: pos + 1])))
            return int(self._ids[rows[pos]])
        except BudgetExhausted:
            return TIMEOUT

    def has_near(self, q: np.ndarray, radius: float) -> bool:
        """Decision form of :meth:`classic_query` (``q`` already validated)."""
        rows = np.flatnonzero(self.collision_mask(q).any(axis=0))
        if len(rows) == 0:
            return False
        return bool((self.row_distances(rows, q) <= radius).any())

    def buckets(self, table: int) -> dict:
        """Bucket contents of one table as ``{label: [ids in insertion order]}``."""
        out: dict = {}
        keys = self._keys[table]
        for row in range(self._size):
            if not self._alive[row]:
                continue
            label = int(keys[0, row]) if self._kw == 1 else tuple(int(w) for w in keys[:, row])
            out.setdefault(label, []).append(int(self._ids[row]))
        return out

    def to_bytes(self) -> bytes:
        p = self.params
        buf = io.BytesIO()
        buf.write(
            _HEADER.pack(
                _MAGIC, _VERSION, self.metric.dim, p.k_concat, p.L_tables,
                p.p1, p.p2, p.rho, p.seed & ((1 << 64) - 1), self._size, self._next_id,
            )
        )
        buf.write(self.coords.astype("<u4").tobytes())
        buf.write(self._ids[: self._size].astype("<i8").tobytes())
        buf.write(self._alive[: self._size].astype(np.uint8).tobytes())
        buf.write(np.packbits(self._bits[: self._size], axis=1, bitorder="little").tobytes())
        for t in range(self.L):
            bks = self.buckets(t)
            buf.write(struct.pack("<I", len(bks)))
            for label, members in bks.items():
                words = (label,) if self._kw == 1 else label
                buf.write(np.asarray(words, dtype="<u8").tobytes())
                buf.write(struct.pack("<I", len(members)))
                buf.write(np.asarray(members, dtype="<i8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AmplifiedLshIndex":
        (magic, version, dim, k, L, p1, p2, rho, seed, size, next_id) = _HEADER.unpack_from(blob, 0)
        if magic != _MAGIC:
            raise ValueError("not a serialized AmplifiedLshIndex")
        if version != _VERSION:
            raise ValueError(f"unsupported index version {version}")
        off = _HEADER.size
        idx = cls(LshParams(k, L, p1, p2, rho, seed), Metric.hamming(dim))
        coords = np.frombuffer(blob, "<u4", L * k, off).astype(np.int64).reshape(L, k)
        off += 4 * L * k
        if not np.array_equal(coords, idx.coords):
            raise ValueError("coordinate lists do not match the seed")
        ids = np.frombuffer(blob, "<i8", size, off).astype(np.int64)
        off += 8 * size
        alive = np.frombuffer(blob, np.uint8, size, off).astype(bool)
        off += size
        row_bytes = -(-dim // 8)
        packed = np.frombuffer(blob, np.uint8, size * row_bytes, off).reshape(size, row_bytes)
        off += size * row_bytes
        bits = np.unpackbits(packed, axis=1, count=dim, bitorder="little")
        idx._append(bits, ids)
        idx._alive[:size] = alive
        idx._row_of = {int(i): r for r, i in enumerate(ids.tolist()) if alive[r]}
        idx._next_id = next_id
        for t in range(L):
            (nb,) = struct.unpack_from("<I", blob, off)
            off += 4
            for _ in range(nb):
                off += 8 * idx._kw
                (cnt,) = struct.unpack_from("<I", blob, off)
                off += 4 + 8 * cnt
        if off != len(blob):
            raise ValueError("trailing bytes in serialized index")
        return idx


def _coord_key(seed: int) -> np.ndarray:
    from .rng import stream_key

    return stream_key(seed, "lsh-coords")


def _grow(arr: np.ndarray, cap: int) -> np.ndarray:
    out = np.zeros((cap,) + arr.shape[1:], dtype=arr.dtype)
    out[: len(arr)] = arr
    return out


class ClassicLSH(BaseEstimator):
    """Oblivious ``(c, r)``-ANN over the Hamming cube.

    Parameters
    ----------
    c, r : approximation factor and radius.
    boost : multiplies ``n^rho`` when sizing the number of tables.
    n_tables : fixed number of tables, overriding the derived value.
    rho_mode : ``"exact"`` or a key of :data:`RHO_FUNCTIONS`.
    seed : setup seed.
    """

    def __init__(self, c=2.0, r=1.0, boost=1.0, n_tables=None, rho_mode="exact", seed=0):
        self.c = c
        self.r = r
        self.boost = boost
        self.n_tables = n_tables
        self.rho_mode = rho_mode
        self.seed = seed

    def fit(self, X, y=None):
        X = check_hamming_fit(X)
        self.metric_ = Metric.hamming(X.shape[1])
        self.dataset_ = Dataset(self.metric_, X)
        self.problem_ = ProblemParams(self.c, self.r)
        self.lsh_params_ = derive_params(
            self.problem_, len(X), X.shape[1], self.boost,
            seed=self.seed, rho_mode=self.rho_mode, n_tables=self.n_tables,
        )
        self.index_ = AmplifiedLshIndex.build(self.dataset_, self.lsh_params_)
        self.last_charge_ = 0
        return self

    def query(self, q):
        check_is_fitted(self, "index_")
        q = check_query(self.metric_, q)
        budget = WorkBudget()
        ans = self.index_.classic_query(q, self.problem_.cr, budget)
        self.last_charge_ = budget.spent
        return ans

    def decide(self, q) -> int:
        check_is_fitted(self, "index_")
        return int(self.index_.has_near(check_query(self.metric_, q), self.problem_.cr))

    def candidates(self, q):
        check_is_fitted(self, "index_")
        return self.index_.candidates(check_query(self.metric_, q))

    def predict(self, X):
        return np.array([answer_code(self.query(q)) for q in check_queries(self.metric_, X)], dtype=np.int64)

    def insert(self, x) -> int:
        check_is_fitted(self, "index_")
        id_ = self.dataset_.insert(x)
        self.index_.insert(self.dataset_.point(id_), id_)
        return id_

    def delete(self, id_: int) -> None:
        check_is_fitted(self, "index_")
        self.dataset_.delete(id_)
        self.index_.delete(id_)
