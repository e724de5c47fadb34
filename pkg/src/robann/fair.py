"""Exact fair near-neighbor sampling over a boosted LSH index.

A query collects the multiset of (table, point) collisions, then repeats:
draw one collision pair uniformly, keep it with probability
``1/collision_count(point)``, and return the point if it lies within ``r``.
Every point in the candidate set is therefore kept with the same
probability per iteration, so a returned id is uniform over the in-range
candidates. Query coins come from a per-query stream, never the setup one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import answer_code, check_hamming_fit, check_queries, check_query
from .budget import TIMEOUT, BudgetExhausted, WorkBudget
from .lsh import AmplifiedLshIndex, LshParams, derive_params
from .metric import Dataset, Metric, ProblemParams
from .rng import derive_seed, stream

__all__ = ["FairIndex", "FairLSH", "TIMEOUT", "WorkBudget", "fair_query"]

_BATCH = 64
_CACHE = 256


@dataclass
class _QueryState:
    rows: np.ndarray  # candidate rows
    counts: np.ndarray  # collision count per candidate
    near: np.ndarray  # candidate within radius
    cum: np.ndarray  # cumulative pair counts
    total: int


class FairIndex:
    """Boosted index with ``L = ceil(n^rho * boost_const * ln(nQ))`` tables.

    ``radius`` defaults to ``problem.r``; the LSH family is sized for
    ``(problem.c, problem.r)``.
    """

    def __init__(self, index: AmplifiedLshIndex, problem: ProblemParams, n_build: int,
                 reject_const: float = 100.0, radius: float | None = None):
        self.index = index
        self.problem = problem
        self.radius = float(problem.r if radius is None else radius)
        self.reject_const = float(reject_const)
        nq = max(n_build, 1) * problem.Q
        self.log_nq = math.log(nq) if nq > 1 else 0.0
        self.max_rejections = max(1, math.ceil(self.reject_const * index.L * max(self.log_nq, 1.0)))
        self._states: dict[bytes, _QueryState] = {}

    @classmethod
    def build(cls, ds: Dataset, problem: ProblemParams, seed: int = 0, *, boost_const: float = 1.0,
              reject_const: float = 100.0, n_tables: int | None = None,
              radius: float | None = None) -> "FairIndex":
        n = len(ds)
        nq = max(n, 1) * problem.Q
        boost = boost_const * (math.log(nq) if nq > 1 else 1.0)
        lp = derive_params(problem, n, ds.metric.dim, boost, seed=derive_seed(seed, "setup"), n_tables=n_tables)
        return cls(AmplifiedLshIndex.build(ds, lp), problem, n, reject_const, radius)

    @property
    def lsh_params(self) -> LshParams:
        return self.index.params

    def insert(self, x, id_: int) -> int:
        self._states.clear()
        return self.index.insert(x, id_)

    def delete(self, id_: int) -> None:
        self._states.clear()
        self.index.delete(id_)

    def _prepare(self, q: np.ndarray) -> _QueryState:
        # the candidate state depends only on setup and q; keep a small cache
        key = q.tobytes()
        st = self._states.get(key)
        if st is None:
            if len(self._states) >= _CACHE:
                self._states.clear()
            st = self._states[key] = self._collect(q)
        return st

    def _collect(self, q: np.ndarray) -> _QueryState:
        counts = self.index.collision_mask(q).sum(axis=0)
        rows = np.flatnonzero(counts)
        counts = counts[rows]
        near = self.index.row_distances(rows, q) <= self.radius
        cum = np.cumsum(counts)
        return _QueryState(rows, counts, near, cum, int(cum[-1]) if len(cum) else 0)

    def _draw(self, st: _QueryState, rng: np.random.Generator, budget: WorkBudget):
        """One query given a prepared candidate state; raises BudgetExhausted."""
        budget.charge(self.index.L)
        if st.total == 0:
            return None
        if not st.near.any():
            budget.charge(self.max_rejections + len(st.rows))
            return None
        left = self.max_rejections
        while left > 0:
            b = min(_BATCH, left)
            pair = rng.integers(0, st.total, size=b)
            u = rng.random(b)
            j = np.searchsorted(st.cum, pair, side="right")
            ok = (u * st.counts[j] < 1.0) & st.near[j]
            if ok.any():
                first = int(np.argmax(ok))
                budget.charge(first + 1)
                return int(self.index._ids[st.rows[j[first]]])
            budget.charge(b)
            left -= b
        # exhaustive fallback over the distinct candidates
        budget.charge(len(st.rows))
        near_rows = st.rows[st.near]
        return int(self.index._ids[near_rows[rng.integers(len(near_rows))]])

    def query(self, q: np.ndarray, rng: np.random.Generator, budget: WorkBudget | None = None):
        """id uniform over in-range candidates, ``None`` (bottom), or :data:`TIMEOUT`."""
        budget = budget if budget is not None else WorkBudget()
        try:
            return self._draw(self._prepare(q), rng, budget)
        except BudgetExhausted:
            return TIMEOUT

    def sample_many(self, q: np.ndarray, trials: int, rng: np.random.Generator) -> np.ndarray:
        """``trials`` independent unbudgeted answers, bottom encoded as -1."""
        st = self._prepare(q)
        out = np.empty(trials, dtype=np.int64)
        for i in range(trials):
            ans = self._draw(st, rng, WorkBudget())
            out[i] = -1 if ans is None else ans
        return out


def fair_query(fi: FairIndex, q, rng: np.random.Generator, budget: WorkBudget | None = None):
    return fi.query(fi.index.metric.check(q, ndim=1), rng, budget)


class FairLSH(BaseEstimator):
    """Fair ``(c, r)``-ANN: each answer is uniform over the in-range points.

    Parameters
    ----------
    c, r : approximation factor and radius.
    Q : number of queries the index is sized for.
    delta : target failure probability.
    boost_const : constant in front of ``ln(nQ)`` in the table count.
    reject_const : rejections allowed per table and log factor before the
        exhaustive fallback.
    n_tables : fixed table count, overriding the derived value.
    seed : master seed; setup and per-query streams are derived from it.
    """

    def __init__(self, c=2.0, r=1.0, Q=1, delta=0.0025, boost_const=1.0, reject_const=100.0,
                 n_tables=None, seed=0):
        self.c = c
        self.r = r
        self.Q = Q
        self.delta = delta
        self.boost_const = boost_const
        self.reject_const = reject_const
        self.n_tables = n_tables
        self.seed = seed

    def fit(self, X, y=None):
        X = check_hamming_fit(X)
        self.metric_ = Metric.hamming(X.shape[1])
        self.dataset_ = Dataset(self.metric_, X)
        self.problem_ = ProblemParams(self.c, self.r, int(self.Q), self.delta)
        self.index_ = FairIndex.build(
            self.dataset_, self.problem_, self.seed,
            boost_const=self.boost_const, reject_const=self.reject_const, n_tables=self.n_tables,
        )
        self.n_queries_ = 0
        self.last_charge_ = 0
        return self

    def _next_rng(self) -> np.random.Generator:
        rng = stream(self.seed, "query", self.n_queries_)
        self.n_queries_ += 1
        return rng

    def query(self, q, rng=None, budget: WorkBudget | None = None):
        check_is_fitted(self, "index_")
        q = check_query(self.metric_, q)
        rng = self._next_rng() if rng is None else rng
        budget = budget if budget is not None else WorkBudget()
        ans = self.index_.query(q, rng, budget)
        self.last_charge_ = budget.spent
        return ans

    def sample_many(self, q, trials: int, rng=None) -> np.ndarray:
        check_is_fitted(self, "index_")
        q = check_query(self.metric_, q)
        return self.index_.sample_many(q, int(trials), self._next_rng() if rng is None else rng)

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
