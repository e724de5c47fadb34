"""Robust searchers built from oblivious LSH pieces.

* :class:`RobustDecider` answers the weak decision problem by asking a
  random subsample of independent LSH copies and thresholding a noisy vote.
* :class:`BucketedANN` splits the data into segments, runs one decider per
  segment and scans a segment exhaustively when its decider says yes.
* :class:`AnnuliANN` splits ``(r, cr]`` into geometric annuli, estimates
  which annuli admit a fast fair query, and answers from the smallest one.
* :class:`RelaxedFairANN` runs the annuli in order under a fixed work budget
  without any noise.

Copies and pool instances are built on first use from a seed that depends
only on their position, so large full-size pools cost nothing until they
are sampled.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import answer_code, check_hamming_fit, check_queries, check_query
from .budget import TIMEOUT, WorkBudget
from .dp import decider_constants, laplace_sample
from .fair import FairIndex
from .lsh import RHO_FUNCTIONS, AmplifiedLshIndex, bit_sampling_rho, derive_params
from .metric import Dataset, Metric, ProblemParams
from .rng import derive_seed, stream

__all__ = [
    "QueryBudgetExceeded",
    "RobustDecider",
    "BucketedANN",
    "AnnuliANN",
    "RelaxedFairANN",
    "MedianAnnuliANN",
    "ExponentReport",
    "exponent_optimize",
    "median_amplify",
    "annulus_radii",
    "annulus_counts",
    "has_good_annulus",
]


class QueryBudgetExceeded(RuntimeError):
    """Raised when a searcher is asked more queries than it was sized for."""


class _Members:
    """Insertion-ordered id -> point store shared by lazily built copies."""

    def __init__(self, metric: Metric, X: np.ndarray, ids):
        self.metric = metric
        self.pts = {int(i): np.asarray(x) for i, x in zip(ids, X)}

    def __len__(self):
        return len(self.pts)

    def arrays(self):
        if not self.pts:
            return np.zeros((0, self.metric.dim), dtype=np.uint8), np.zeros(0, dtype=np.int64)
        return np.stack(list(self.pts.values())), np.fromiter(self.pts.keys(), dtype=np.int64)


class _DeciderCore:
    """Subsampled noisy vote over ``n_copies`` classic LSH deciders."""

    def __init__(self, members: _Members, problem: ProblemParams, n_copies: int, k_sub: int,
                 copy_success: float, seed: int, noise: bool = True):
        self.members = members
        self.problem = problem
        self.n_copies = int(n_copies)
        self.k_sub = int(k_sub)
        self.noise = noise
        self.seed = seed
        boost = math.log(1.0 / (1.0 - copy_success))
        self._lsh = derive_params(problem, len(members), members.metric.dim, boost)
        self._copies: dict[int, AmplifiedLshIndex] = {}
        self._memo: dict[tuple[int, bytes], int] = {}
        self.n_queries = 0
        self.last_vote = None
        self.last_noisy = None

    def copy(self, j: int) -> AmplifiedLshIndex:
        idx = self._copies.get(j)
        if idx is None:
            lp = dataclasses.replace(self._lsh, seed=derive_seed(self.seed, "copy", j))
            X, ids = self.members.arrays()
            idx = AmplifiedLshIndex.from_points(X, ids, lp, self.members.metric)
            self._copies[j] = idx
        return idx

    def copy_answer(self, j: int, q: np.ndarray, key: bytes) -> int:
        hit = self._memo.get((j, key))
        if hit is None:
            hit = int(self.copy(j).has_near(q, self.problem.cr))
            self._memo[(j, key)] = hit
        return hit

    def decide(self, q: np.ndarray, rng: np.random.Generator) -> int:
        if self.n_queries >= self.problem.Q:
            raise QueryBudgetExceeded(f"decider was sized for Q={self.problem.Q} queries")
        self.n_queries += 1
        picks = rng.integers(0, self.n_copies, size=self.k_sub)
        key = q.tobytes()
        vote = sum(self.copy_answer(int(j), q, key) for j in picks) / self.k_sub
        noisy = vote + (laplace_sample(1.0 / self.k_sub, rng) if self.noise else 0.0)
        self.last_vote, self.last_noisy = vote, noisy
        return int(noisy > 0.5)

    def insert(self, x: np.ndarray, id_: int) -> None:
        for idx in self._copies.values():
            idx.insert(x, id_)
        self._memo.clear()

    def delete(self, id_: int) -> None:
        for idx in self._copies.values():
            idx.delete(id_)
        self._memo.clear()


class _HammingSearcher(BaseEstimator):
    def _fit_data(self, X):
        X = check_hamming_fit(X)
        self.metric_ = Metric.hamming(X.shape[1])
        self.dataset_ = Dataset(self.metric_, X)
        self.n_queries_ = 0
        self.last_charge_ = 0
        return X

    def _next_rng(self, rng):
        if rng is not None:
            return rng
        rng = stream(self.seed, "query", self.n_queries_)
        self.n_queries_ += 1
        return rng

    def predict(self, X):
        return np.array([answer_code(self.query(q)) for q in check_queries(self.metric_, X)], dtype=np.int64)


class RobustDecider(_HammingSearcher):
    """Weak ``(c, r)`` decision that stays correct against adaptive queries.

    Parameters
    ----------
    c, r, Q, delta : problem parameters; at most ``Q`` calls to :meth:`decide`.
    n_copies, k_sub : copy count and subsample size. ``None`` uses the
        full-size constants from :func:`robann.dp.decider_constants`.
    copy_success : per-copy success probability used to size each copy.
    noise : add Laplace noise to the vote (switch off to test the threshold).
    seed : master seed.
    """

    def __init__(self, c=2.0, r=1.0, Q=1, delta=0.0025, n_copies=None, k_sub=None,
                 copy_success=0.95, noise=True, seed=0):
        self.c = c
        self.r = r
        self.Q = Q
        self.delta = delta
        self.n_copies = n_copies
        self.k_sub = k_sub
        self.copy_success = copy_success
        self.noise = noise
        self.seed = seed

    def fit(self, X, y=None):
        X = self._fit_data(X)
        self.problem_ = ProblemParams(self.c, self.r, int(self.Q), self.delta)
        const = decider_constants(self.problem_)
        self.n_copies_ = const.L if self.n_copies is None else int(self.n_copies)
        self.k_sub_ = const.k_sub if self.k_sub is None else int(self.k_sub)
        self.core_ = _DeciderCore(
            _Members(self.metric_, X, self.dataset_.ids), self.problem_, self.n_copies_, self.k_sub_,
            self.copy_success, derive_seed(self.seed, "setup"), self.noise,
        )
        return self

    def decide(self, q, rng=None) -> int:
        check_is_fitted(self, "core_")
        q = check_query(self.metric_, q)
        return self.core_.decide(q, self._next_rng(rng))

    def query(self, q, rng=None) -> int:
        return self.decide(q, rng)

    def insert(self, x) -> int:
        check_is_fitted(self, "core_")
        id_ = self.dataset_.insert(x)
        self.core_.members.pts[id_] = self.dataset_.point(id_)
        self.core_.insert(self.dataset_.point(id_), id_)
        return id_

    def delete(self, id_: int) -> None:
        check_is_fitted(self, "core_")
        self.dataset_.delete(id_)
        del self.core_.members.pts[int(id_)]
        self.core_.delete(id_)


class BucketedANN(_HammingSearcher):
    """Segment the data, decide per segment, scan the segments that say yes.

    Segments hold ``ceil(n / kappa)`` consecutive points with
    ``kappa = ceil(n^(1 - alpha))`` and ``alpha = 1 / (2 - rho)``; each gets
    its own decider with failure budget ``delta / kappa``. Parameters match
    :class:`RobustDecider`; ``deciders`` may supply a callable
    ``(segment_index, core) -> decider`` replacing the LSH deciders.
    """

    def __init__(self, c=2.0, r=1.0, Q=1, delta=0.0025, n_copies=None, k_sub=None,
                 copy_success=0.95, noise=True, deciders=None, seed=0):
        self.c = c
        self.r = r
        self.Q = Q
        self.delta = delta
        self.n_copies = n_copies
        self.k_sub = k_sub
        self.copy_success = copy_success
        self.noise = noise
        self.deciders = deciders
        self.seed = seed

    def fit(self, X, y=None):
        X = self._fit_data(X)
        n, d = X.shape
        self.problem_ = ProblemParams(self.c, self.r, int(self.Q), self.delta)
        self.rho_ = bit_sampling_rho(d, self.r, self.c)
        self.alpha_ = 1.0 / (2.0 - self.rho_)
        self.kappa_ = max(1, math.ceil(max(n, 1) ** (1.0 - self.alpha_) - 1e-9))
        size = max(1, -(-n // self.kappa_))
        seg_problem = ProblemParams(self.c, self.r, int(self.Q), self.delta / self.kappa_)
        const = decider_constants(seg_problem)
        self.n_copies_ = const.L if self.n_copies is None else int(self.n_copies)
        self.k_sub_ = const.k_sub if self.k_sub is None else int(self.k_sub)
        self.segments_: list[_Members] = []
        self.cores_ = []
        for s in range(self.kappa_):
            sl = slice(s * size, min(n, (s + 1) * size))
            mem = _Members(self.metric_, X[sl], self.dataset_.ids[sl])
            core = _DeciderCore(mem, seg_problem, self.n_copies_, self.k_sub_, self.copy_success,
                                derive_seed(self.seed, "segment", s), self.noise)
            self.segments_.append(mem)
            self.cores_.append(core if self.deciders is None else self.deciders(s, core))
        self.owner_ = {int(i): s for s, m in enumerate(self.segments_) for i in m.pts}
        return self

    def query(self, q, rng=None):
        check_is_fitted(self, "cores_")
        q = check_query(self.metric_, q)
        rng = self._next_rng(rng)
        charge = 0
        bits = []
        for core in self.cores_:
            bits.append(core.decide(q, rng))
            charge += getattr(core, "k_sub", 1)
        for s, bit in enumerate(bits):
            if not bit:
                continue
            X, ids = self.segments_[s].arrays()
            if len(ids) == 0:
                continue
            dist = self.metric_.distances(X, q)
            hit = np.flatnonzero(dist <= self.problem_.cr)
            charge += len(ids) if len(hit) == 0 else int(hit[0]) + 1
            if len(hit):
                self.last_charge_ = charge
                return int(ids[hit[0]])
        self.last_charge_ = charge
        return None

    def insert(self, x) -> int:
        check_is_fitted(self, "cores_")
        id_ = self.dataset_.insert(x)
        s = min(range(len(self.segments_)), key=lambda j: len(self.segments_[j]))
        pt = self.dataset_.point(id_)
        self.segments_[s].pts[id_] = pt
        self.cores_[s].insert(pt, id_)
        self.owner_[id_] = s
        return id_

    def delete(self, id_: int) -> None:
        check_is_fitted(self, "cores_")
        self.dataset_.delete(id_)
        s = self.owner_.pop(int(id_))
        del self.segments_[s].pts[int(id_)]
        self.cores_[s].delete(id_)


def annulus_radii(r: float, c: float, k: int) -> np.ndarray:
    """``r_i = r c^(i/k)`` for ``i = 0..k`` with the last radius pinned to ``cr``."""
    radii = r * c ** (np.arange(k + 1) / k)
    radii[-1] = c * r
    return radii


class AnnuliANN(_HammingSearcher):
    """Noisy detection of a fast annulus followed by one fair query there.

    Annulus ``i`` (1-based) owns a pool of fair indices with near radius
    ``r_(i-1)`` and far radius ``r_i``. A query samples ``n_samples`` pool
    members per annulus, runs each under the truncation budget, and flags the
    annulus when the noisy finishing rate reaches ``good_threshold - eta``.

    Parameters
    ----------
    c, r, Q, delta : problem parameters.
    n_annuli : number of annuli ``k``.
    eta, good_threshold : estimate accuracy and the finishing-rate target.
    pool_size, n_samples : pool size per annulus and samples per query;
        ``None`` uses the full-size formulas.
    trunc_const : constant of the truncation budget.
    boost_const, reject_const : passed to each fair index.
    seed : master seed.
    """

    def __init__(self, c=2.0, r=1.0, Q=1, delta=0.0025, n_annuli=2, eta=0.001, good_threshold=0.999,
                 pool_size=None, n_samples=None, trunc_const=4.0, boost_const=1.0, reject_const=100.0,
                 seed=0):
        self.c = c
        self.r = r
        self.Q = Q
        self.delta = delta
        self.n_annuli = n_annuli
        self.eta = eta
        self.good_threshold = good_threshold
        self.pool_size = pool_size
        self.n_samples = n_samples
        self.trunc_const = trunc_const
        self.boost_const = boost_const
        self.reject_const = reject_const
        self.seed = seed

    def fit(self, X, y=None):
        X = self._fit_data(X)
        n, d = X.shape
        k = int(self.n_annuli)
        Q = int(self.Q)
        self.problem_ = ProblemParams(self.c, self.r, Q, self.delta)
        self.radii_ = annulus_radii(self.r, self.c, k)
        self.c_step_ = self.c ** (1.0 / k)
        log_term = math.log(Q * k / self.delta)
        m = math.ceil(log_term / self.eta**2)
        L = math.ceil(2400 * math.log(1 / self.delta) ** 1.5 * math.sqrt(2 * Q))
        self.pool_size_ = m * L if self.pool_size is None else int(self.pool_size)
        self.n_samples_ = math.ceil(2 / self.eta * log_term) if self.n_samples is None else int(self.n_samples)
        self.threshold_ = self.good_threshold - self.eta
        self.rhos_ = np.array([bit_sampling_rho(d, self.radii_[i], self.c_step_) for i in range(k)])
        nq = max(n, 1) * Q
        ln_nq = math.ceil(math.log(nq)) if nq > 1 else 1
        self.trunc_budgets_ = [
            math.ceil(self.trunc_const * (max(n, 1) ** (1.0 / k) + max(n, 1) ** rho) * ln_nq) for rho in self.rhos_
        ]
        self._pools: list[dict] = [{} for _ in range(k)]
        self._exec = [self._build(i, "exec") for i in range(k)]
        self.n_answered_ = 0
        return self

    def _problem(self, i: int) -> ProblemParams:
        return ProblemParams(self.c_step_, float(self.radii_[i]), int(self.Q), self.delta)

    def _build(self, i: int, tag) -> FairIndex:
        return FairIndex.build(
            self.dataset_, self._problem(i), derive_seed(self.seed, "annulus", i, tag),
            boost_const=self.boost_const, reject_const=self.reject_const,
        )

    def instance(self, i: int, j: int) -> FairIndex:
        """Pool member ``j`` of annulus ``i`` (0-based), built on first use."""
        pool = self._pools[i]
        if j not in pool:
            pool[j] = self._build(i, j)
        return pool[j]

    def annulus_estimates(self, q, rng=None):
        """``(noisy, raw, charge)``: finishing-rate estimates per annulus and work spent."""
        check_is_fitted(self, "_exec")
        q = check_query(self.metric_, q)
        return self._estimates(q, self._next_rng(rng))

    def _estimates(self, q, rng):
        k = len(self._exec)
        raw = np.zeros(k)
        charge = 0
        for i in range(k):
            picks = rng.integers(0, self.pool_size_, size=self.n_samples_)
            done = 0
            for j in picks:
                b = WorkBudget(self.trunc_budgets_[i])
                ans = self.instance(i, int(j)).query(q, rng, b)
                charge += b.spent
                done += ans is not TIMEOUT
            raw[i] = done / self.n_samples_
        noisy = raw + laplace_sample(1.0 / self.n_samples_, rng, size=k)
        return noisy, raw, charge

    def query_with_charge(self, q, rng=None):
        check_is_fitted(self, "_exec")
        q = check_query(self.metric_, q)
        if self.n_answered_ >= self.problem_.Q:
            raise QueryBudgetExceeded(f"searcher was sized for Q={self.problem_.Q} queries")
        self.n_answered_ += 1
        rng = self._next_rng(rng)
        noisy, _, charge = self._estimates(q, rng)
        flagged = np.flatnonzero(noisy >= self.threshold_)
        self.last_flags_ = noisy >= self.threshold_
        if len(flagged) == 0:
            self.last_annulus_ = None
            return None, charge
        i = int(flagged[0])
        self.last_annulus_ = i + 1
        b = WorkBudget()
        ans = self._exec[i].query(q, rng, b)
        charge += b.spent
        if ans is not None and self.metric_.distance(self.dataset_.point(ans), q) > self.problem_.cr:
            raise AssertionError("annuli answer outside the cr-ball")
        return ans, charge

    def query(self, q, rng=None):
        ans, self.last_charge_ = self.query_with_charge(q, rng)
        return ans

    def _instances(self):
        for pool in self._pools:
            yield from pool.values()
        yield from self._exec

    def insert(self, x) -> int:
        check_is_fitted(self, "_exec")
        id_ = self.dataset_.insert(x)
        for fi in self._instances():
            fi.insert(self.dataset_.point(id_), id_)
        return id_

    def delete(self, id_: int) -> None:
        check_is_fitted(self, "_exec")
        self.dataset_.delete(id_)
        for fi in self._instances():
            fi.delete(id_)


class RelaxedFairANN(AnnuliANN):
    """Try annuli in order, each under a fixed budget, and return the first finished answer.

    The budget of annulus ``i`` is ``ceil(budget_const * n^max(rho_i, 1/k))``.
    ``last_annulus_`` records which annulus answered and ``last_radius_`` its
    near radius, over which a returned id is uniform.
    """

    def __init__(self, c=2.0, r=1.0, Q=1, delta=0.0025, n_annuli=2, budget_const=100.0,
                 boost_const=1.0, reject_const=100.0, seed=0):
        super().__init__(c=c, r=r, Q=Q, delta=delta, n_annuli=n_annuli, pool_size=1, n_samples=1,
                         boost_const=boost_const, reject_const=reject_const, seed=seed)
        self.budget_const = budget_const

    def fit(self, X, y=None):
        super().fit(X)
        n = max(len(self.dataset_), 1)
        k = int(self.n_annuli)
        self.run_budgets_ = [math.ceil(self.budget_const * n ** max(rho, 1.0 / k)) for rho in self.rhos_]
        return self

    def query_with_charge(self, q, rng=None):
        check_is_fitted(self, "_exec")
        q = check_query(self.metric_, q)
        rng = self._next_rng(rng)
        charge = 0
        for i, fi in enumerate(self._exec):
            b = WorkBudget(self.run_budgets_[i])
            ans = fi.query(q, rng, b)
            charge += b.spent
            if ans is not TIMEOUT:
                self.last_annulus_ = i + 1
                self.last_radius_ = float(self.radii_[i])
                return ans, charge
        self.last_annulus_ = None
        self.last_radius_ = None
        return None, charge


def median_amplify(copies, q, rng: np.random.Generator):
    """Run every copy once; return ``(answer, charge)`` of the copy with median charge.

    ``copies`` is a sequence of objects with ``query_with_charge(q, rng)``;
    its length must be odd. Ties in charge keep copy order.
    """
    t = len(copies)
    if t % 2 == 0:
        raise ValueError("median amplification needs an odd number of copies")
    runs = [cp.query_with_charge(q, rng) for cp in copies]
    order = sorted(range(t), key=lambda j: runs[j][1])
    return runs[order[t // 2]]


class MedianAnnuliANN(_HammingSearcher):
    """``t`` independent :class:`AnnuliANN` copies combined by median charge."""

    def __init__(self, t=3, annuli_params=None, seed=0):
        self.t = t
        self.annuli_params = annuli_params
        self.seed = seed

    def fit(self, X, y=None):
        X = self._fit_data(X)
        if self.t % 2 == 0:
            raise ValueError("t must be odd")
        self.copies_ = [
            AnnuliANN(**(self.annuli_params or {}), seed=derive_seed(self.seed, "median", j)).fit(X) for j in range(self.t)
        ]
        return self

    def query_with_charge(self, q, rng=None):
        check_is_fitted(self, "copies_")
        q = check_query(self.metric_, q)
        return median_amplify(self.copies_, q, self._next_rng(rng))

    def query(self, q, rng=None):
        ans, self.last_charge_ = self.query_with_charge(q, rng)
        return ans


@dataclass(frozen=True)
class ExponentReport:
    c: float
    rho_fn: str
    k_star: int
    beta: float
    k_continuous: float


def _k_max(c: float) -> int:
    return 10 * math.ceil(math.log(c) / math.log(math.log(max(c, 3.0)))) + 10


def exponent_optimize(c: float, rho_fn: str = "hamming_opt") -> ExponentReport:
    """Minimize ``max(rho(c^(1/k)), 1/k)`` over integer ``k``; smallest ``k`` wins ties."""
    if not c > 1:
        raise ValueError("c must be > 1")
    rho = RHO_FUNCTIONS[rho_fn]
    best_k, best = 1, math.inf
    for k in range(1, _k_max(c) + 1):
        val = max(rho(c ** (1.0 / k)), 1.0 / k)
        if val < best:
            best_k, best = k, val
    f = lambda k: rho(c ** (1.0 / k)) - 1.0 / k
    hi = 2.0
    while f(hi) < 0 and hi < 1e6:
        hi *= 2
    lo = 0.5
    k_cont = brentq(f, lo, hi) if f(lo) < 0 < f(hi) else math.nan
    return ExponentReport(float(c), rho_fn, best_k, best, k_cont)


def annulus_counts(ds: Dataset, q, r: float, c: float, k: int) -> list[int]:
    """``n(q, r_i)`` for ``i = 0..k``."""
    _, dist = ds.distances(q)
    return [int((dist <= rad).sum()) for rad in annulus_radii(r, c, k)]


def has_good_annulus(ds: Dataset, q, r: float, c: float, k: int) -> bool:
    """Some consecutive ball-size ratio is at most ``n^(1/k)`` (exact integer check)."""
    counts = annulus_counts(ds, q, r, c, k)
    n = len(ds)
    if counts[0] == 0:
        raise ValueError("the r-ball around q is empty")
    return any(counts[i + 1] ** k <= n * counts[i] ** k for i in range(k))
