"""Structures that answer every query correctly with high probability.

:class:`ForAllHammingANN` sizes a bit-sampling index so a union bound over
all ``2^d`` queries goes through. :class:`DiscretizedANN` handles ``l_p`` by
snapping the query to a covering and asking a slightly stricter inner ANN
about the snapped point.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import answer_code, check_hamming_fit, check_lp_fit, check_queries, check_query
from .budget import WorkBudget
from .lsh import RHO_FUNCTIONS, AmplifiedLshIndex, LshParams, bit_sampling_probs
from .metric import Dataset, Metric, ProblemParams
from .rng import derive_seed, stream

__all__ = [
    "NOT_COVERED",
    "Covering",
    "DiscretizedANN",
    "ForAllHammingANN",
    "forall_params",
    "rho_prime",
]


def forall_params(n: int, d: int, r: float, c: float, *, rho_mode: str = "bit_sampling",
                  table_const: float = 1.0, seed: int = 0) -> LshParams:
    """``k = ceil(log_{1/p2} n)``, ``L = ceil(table_const * n^rho * d * ln n)``, both at least 1.

    Raises ``ValueError`` unless ``L ln(1 - p1^k) <= -ln(n^2 2^d)``.
    """
    if rho_mode not in ("bit_sampling", "hamming_opt"):
        raise ValueError(f"rho_mode must be 'bit_sampling' or 'hamming_opt', got {rho_mode!r}")
    p1, p2 = bit_sampling_probs(d, r, c)
    rho = RHO_FUNCTIONS[rho_mode](c)
    n = max(int(n), 1)
    k = 1 if p2 == 0.0 else max(1, math.ceil(math.log(n) / math.log(1 / p2) - 1e-12))
    L = max(1, math.ceil(table_const * n**rho * d * math.log(n) - 1e-9))
    lhs = L * math.log1p(-(p1**k))
    rhs = -(2 * math.log(n) + d * math.log(2))
    if not lhs <= rhs:
        raise ValueError(
            f"for-all sizing fails: L*ln(1-p1^k) = {lhs:.4g} > -ln(n^2 2^d) = {rhs:.4g} "
            f"(n={n}, d={d}, k={k}, L={L}); raise table_const"
        )
    return LshParams(k, L, p1, p2, rho, seed)


class ForAllHammingANN(BaseEstimator):
    """Hamming ``(c, r)``-ANN sized to be correct on all ``2^d`` queries at once.

    Parameters
    ----------
    c, r : approximation factor and radius.
    rho_mode : ``"bit_sampling"`` (``1/c``) or ``"hamming_opt"`` (``1/(2c-1)``),
        used only to size the table count.
    table_const : constant in front of ``n^rho d ln n``.
    sample_const : constant in the number of probed tables of
        :meth:`query_sampled`.
    seed : setup seed.
    """

    def __init__(self, c=2.0, r=1.0, rho_mode="bit_sampling", table_const=1.0, sample_const=1.0, seed=0):
        self.c = c
        self.r = r
        self.rho_mode = rho_mode
        self.table_const = table_const
        self.sample_const = sample_const
        self.seed = seed

    def fit(self, X, y=None):
        X = check_hamming_fit(X)
        n, d = X.shape
        self.metric_ = Metric.hamming(d)
        self.dataset_ = Dataset(self.metric_, X)
        self.problem_ = ProblemParams(self.c, self.r)
        self.lsh_params_ = forall_params(n, d, self.r, self.c, rho_mode=self.rho_mode,
                                         table_const=self.table_const, seed=derive_seed(self.seed, "setup"))
        self.index_ = AmplifiedLshIndex.build(self.dataset_, self.lsh_params_)
        self.n_probes_ = max(1, math.ceil(max(n, 1) ** self.lsh_params_.rho * math.log(max(n, 2)) * self.sample_const))
        self.n_queries_ = 0
        self.last_charge_ = 0
        return self

    def query(self, q):
        """Scan all tables; first id within ``cr`` or ``None``."""
        check_is_fitted(self, "index_")
        q = check_query(self.metric_, q)
        b = WorkBudget()
        ans = self.index_.classic_query(q, self.problem_.cr, b)
        self.last_charge_ = b.spent
        return ans

    def query_sampled(self, q, rng=None):
        """Probe ``n_probes_`` random tables, falling back to the full scan on a miss."""
        check_is_fitted(self, "index_")
        q = check_query(self.metric_, q)
        if rng is None:
            rng = stream(self.seed, "query", self.n_queries_)
            self.n_queries_ += 1
        tables = rng.integers(0, self.index_.L, size=self.n_probes_)
        mask = self.index_.collision_mask(q)[tables]
        t_idx, rows = np.nonzero(mask)
        charge = self.n_probes_
        if len(rows):
            uniq = np.unique(rows)
            near = set(uniq[self.index_.row_distances(uniq, q) <= self.problem_.cr].tolist())
            for pos, row in enumerate(rows.tolist()):
                if row in near:
                    self.last_charge_ = charge + len(np.unique(rows[: pos + 1]))
                    return int(self.index_._ids[row])
            charge += len(uniq)
        ans = self.query(q)
        self.last_charge_ += charge
        return ans

    def predict(self, X):
        return np.array([answer_code(self.query(q)) for q in check_queries(self.metric_, X)], dtype=np.int64)


def rho_prime(c: float) -> float:
    """LSH exponent of the inner ``l_2`` problem after discretizing with ``Delta = cr/10``."""
    return (10 + c) ** 2 / (161 * c * c - 20 * c - 100)


class _NotCovered:
    def __repr__(self):
        return "NOT_COVERED"

    def __reduce__(self):
        return "NOT_COVERED"


NOT_COVERED = _NotCovered()


class Covering:
    """Implicit ``Delta``-covering of a box or of the data's ``r``-neighborhoods.

    Grid mode covers ``[-C, C]^d`` with cell centers ``-C + e (2j + 1)``,
    ``j = 0..m-1``, where ``m = ceil(C / eps)``, ``e = C / m <= eps`` and
    ``eps = Delta / d^(1/p)``. Data-dependent mode places an anchor-local grid
    of step ``2 eps`` around every data point and covers the points within
    ``r`` of some anchor.
    """

    def __init__(self, mode: str, dim: int, delta: float, p: float = 2.0, *, C: float | None = None,
                 anchors: np.ndarray | None = None, r: float | None = None, cell_cap: float = 1e6):
        if mode not in ("grid", "data_dependent"):
            raise ValueError(f"unknown covering mode {mode!r}")
        if not delta > 0:
            raise ValueError("Delta must be positive")
        self.mode = mode
        self.dim = int(dim)
        self.delta = float(delta)
        self.p = float(p)
        self.metric = Metric.lp(self.dim, self.p)
        self.eps = self.delta / self.dim ** (1.0 / self.p)
        self.cell_cap = cell_cap
        if mode == "grid":
            if C is None or not C > 0:
                raise ValueError("grid covering needs a positive box bound C")
            self.C = float(C)
            self.m = max(1, math.ceil(self.C / self.eps))
            self.step = 2 * self.C / self.m
        else:
            if anchors is None or r is None:
                raise ValueError("data-dependent covering needs anchors and r")
            self.anchors = np.asarray(anchors, dtype=np.float64)
            self.r = float(r)
            self.step = 2 * self.eps
            self.m = 2 * math.ceil(self.r / self.step + 0.5) + 1
        if self.log_count > math.log(cell_cap):
            raise ValueError(
                f"covering has about exp({self.log_count:.2f}) cells, above the cap {cell_cap:g}; "
                "raise Delta or the cap"
            )

    @property
    def log_count(self) -> float:
        """Natural log of the number of cover points."""
        base = self.dim * math.log(self.m)
        if self.mode == "grid":
            return base
        return base + math.log(max(len(self.anchors), 1))

    @property
    def log_size_bound(self) -> float:
        """``d ln(2 C d^(1/p) / Delta)`` in grid mode, ``ln n + d ln(d^(1/p) (2r/Delta + 3))`` otherwise."""
        dp = self.dim ** (1.0 / self.p)
        if self.mode == "grid":
            return self.dim * math.log(2 * self.C * dp / self.delta)
        return math.log(max(len(self.anchors), 1)) + self.dim * math.log(dp * (2 * self.r / self.delta + 3))

    def snap(self, q):
        q = self.metric.check(q, ndim=1)
        if self.mode == "grid":
            if np.abs(q).max() > self.C:
                return NOT_COVERED
            j = np.clip(np.floor((q + self.C) / self.step), 0, self.m - 1)
            return -self.C + self.step * (j + 0.5)
        if len(self.anchors) == 0:
            return NOT_COVERED
        dist = self.metric.distances(self.anchors, q)
        best = int(np.argmin(dist))
        if dist[best] > self.r:
            return NOT_COVERED
        a = self.anchors[best]
        return a + self.step * np.round((q - a) / self.step)


class DiscretizedANN(BaseEstimator):
    """``l_p`` ``(c, r)``-ANN: snap to a covering, then solve ``(c', r + Delta)``-ANN on the snapped point.

    ``c' = (cr - Delta) / (r + Delta)``. The inner structure returns the first
    point within ``c'(r + Delta) = cr - Delta`` of the snapped query, which
    meets the inner contract exactly. Uncovered queries in data-dependent mode
    fall back to a direct ``(c, r)`` scan.

    Parameters
    ----------
    c, r, p : problem parameters.
    delta_cover : covering radius, default ``cr / 10``.
    mode : ``"grid"`` or ``"data_dependent"``.
    C : box bound for grid mode, default the data's sup norm.
    cell_cap : largest allowed covering size.
    """

    def __init__(self, c=2.0, r=1.0, p=2.0, delta_cover=None, mode="grid", C=None, cell_cap=1e6):
        self.c = c
        self.r = r
        self.p = p
        self.delta_cover = delta_cover
        self.mode = mode
        self.C = C
        self.cell_cap = cell_cap

    def fit(self, X, y=None):
        X = check_lp_fit(X)
        n, d = X.shape
        self.metric_ = Metric.lp(d, self.p)
        self.dataset_ = Dataset(self.metric_, X)
        self.problem_ = ProblemParams(self.c, self.r, p=self.p)
        delta = self.c * self.r / 10 if self.delta_cover is None else float(self.delta_cover)
        if not delta < self.r * (self.c - 1) / 2:
            raise ValueError(f"Delta={delta} must be below r(c-1)/2={self.r * (self.c - 1) / 2} so that c' > 1")
        self.delta_ = delta
        self.c_inner_ = (self.c * self.r - delta) / (self.r + delta)
        self.r_inner_ = self.r + delta
        if self.mode == "grid":
            C = float(np.abs(X).max()) if self.C is None and n else self.C
            self.covering_ = Covering("grid", d, delta, self.p, C=C or 1.0, cell_cap=self.cell_cap)
        else:
            self.covering_ = Covering("data_dependent", d, delta, self.p, anchors=X, r=self.r,
                                      cell_cap=self.cell_cap)
        self.last_snap_ = None
        return self

    def _scan(self, x, radius):
        ids, dist = self.dataset_.distances(x)
        hit = np.flatnonzero(dist <= radius)
        return int(ids[hit[0]]) if len(hit) else None

    def query(self, q):
        check_is_fitted(self, "covering_")
        q = check_query(self.metric_, q)
        s = self.covering_.snap(q)
        self.last_snap_ = s
        if s is NOT_COVERED:
            if self.mode == "grid":
                raise ValueError(f"query outside the covered box [-{self.covering_.C}, {self.covering_.C}]^d")
            return self._scan(q, self.problem_.cr)
        bound = self.c * self.r - self.delta_  # equals c' (r + Delta)
        ans = self._scan(s, bound)
        if ans is not None:
            x = self.dataset_.point(ans)
            if self.metric_.distance(x, s) > bound:
                raise AssertionError("inner answer farther than cr - Delta from the snapped query")
            if self.metric_.distance(x, q) > self.problem_.cr * (1 + 1e-12):
                raise AssertionError("answer farther than cr from the query")
        return ans

    def predict(self, X):
        return np.array([answer_code(self.query(q)) for q in check_queries(self.metric_, X)], dtype=np.int64)
