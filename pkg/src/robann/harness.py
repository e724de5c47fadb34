"""Adaptive query games, adversary strategies and statistical drivers.

A game fits a searcher on a dataset, then for ``Q`` rounds lets an adversary
pick a query from the public history, answers it and judges the answer with
the brute-force oracle against the dataset as it stands in that round.
Updates scheduled in advance are applied before their round. Adversaries see
the data, the public parameters and the history, never seeds or internals.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest, chisquare
from sklearn.base import BaseEstimator, clone

from .budget import TIMEOUT
from .metric import Dataset, Metric, ProblemParams, oracle_ann_verdicts
from .rng import derive_seed, stream

__all__ = [
    "ADVERSARIES",
    "Adversary",
    "BucketProber",
    "FailureEstimate",
    "FairnessReport",
    "GameConfig",
    "NullSearcher",
    "ObliviousRandom",
    "OracleSearcher",
    "PlantedInstance",
    "PublicView",
    "RepeatAndPerturb",
    "ReplayWorst",
    "Round",
    "Transcript",
    "failure_rate",
    "fairness_test",
    "planted_instance",
    "replay",
    "run_game",
]


# -- searchers used as references ---------------------------------------------------


class OracleSearcher(BaseEstimator):
    """Answers with the nearest point when it lies within ``cr``; never wrong."""

    def __init__(self, c=2.0, r=1.0, seed=0):
        self.c = c
        self.r = r
        self.seed = seed

    def fit(self, X, y=None):
        X = np.asarray(X)
        self.dataset_ = Dataset(Metric.hamming(X.shape[1]), X)
        self.last_charge_ = 0
        return self

    def query(self, q):
        ids, dist = self.dataset_.distances(q)
        self.last_charge_ = len(ids)
        if len(ids) == 0 or dist.min() > self.c * self.r:
            return None
        return int(ids[np.argmin(dist)])

    def insert(self, x) -> int:
        return self.dataset_.insert(x)

    def delete(self, id_: int) -> None:
        self.dataset_.delete(id_)


class NullSearcher(OracleSearcher):
    """Always answers bottom."""

    def query(self, q):
        return None


# -- game records --------------------------------------------------------------------


@dataclass(frozen=True)
class PublicView:
    """What an adversary may look at: live data and public parameters."""

    ids: np.ndarray
    points: np.ndarray
    params: ProblemParams
    Q: int
    task: str


@dataclass(frozen=True)
class Round:
    round: int
    query: np.ndarray
    answer: object
    correct: bool
    charge: int

    def record(self) -> dict:
        ans = self.answer
        if ans is TIMEOUT:
            ans = "TIMEOUT"
        elif ans is not None:
            ans = int(ans)
        return {
            "round": self.round,
            "query": "".join(str(int(b)) for b in self.query),
            "answer": ans,
            "verdict": bool(self.correct),
            "charge": int(self.charge),
        }


@dataclass
class Transcript:
    rounds: list[Round] = field(default_factory=list)

    @property
    def adversary_won(self) -> bool:
        return any(not rd.correct for rd in self.rounds)

    @property
    def n_errors(self) -> int:
        return sum(not rd.correct for rd in self.rounds)

    def history(self) -> list[tuple[np.ndarray, object]]:
        return [(rd.query, rd.answer) for rd in self.rounds]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rd.record(), sort_keys=True) + "\n" for rd in self.rounds)


@dataclass
class GameConfig:
    """One adaptive game.

    ``searcher`` is an unfitted estimator; it is cloned, re-seeded from
    ``seed`` and fitted on ``X``. ``schedule`` maps a 1-based round to the
    updates applied just before it: ``("insert", point)`` or ``("delete", id)``.
    ``task`` is ``"ann"`` (answers are ids) or ``"decision"`` (answers are bits).
    """

    X: np.ndarray
    searcher: BaseEstimator
    adversary: "Adversary"
    params: ProblemParams
    Q: int
    seed: int = 0
    schedule: dict = field(default_factory=dict)
    task: str = "ann"
    stop_on_failure: bool = False

    def __post_init__(self):
        if self.task not in ("ann", "decision"):
            raise ValueError(f"task must be 'ann' or 'decision', got {self.task!r}")
        if self.Q < 1:
            raise ValueError("Q must be positive")
        for t, ops in self.schedule.items():
            if not 1 <= int(t) <= self.Q:
                raise ValueError(f"update scheduled at round {t}, outside 1..{self.Q}")
            for kind, _ in ops:
                if kind not in ("insert", "delete"):
                    raise ValueError(f"unknown update kind {kind!r}")


def _fresh_searcher(cfg: GameConfig):
    est = clone(cfg.searcher)
    if "seed" in est.get_params():
        est.set_params(seed=derive_seed(cfg.seed, "searcher"))
    return est.fit(cfg.X)


def _apply(ops, searcher, mirror: Dataset) -> None:
    for kind, arg in ops:
        if kind == "insert":
            id_ = mirror.insert(arg)
            got = searcher.insert(arg)
            if got != id_:
                raise RuntimeError(f"searcher assigned id {got}, dataset assigned {id_}")
        else:
            mirror.delete(int(arg))
            searcher.delete(int(arg))


def _judge(task: str, mirror: Dataset, q, ans, params: ProblemParams) -> bool:
    if ans is TIMEOUT:
        return False
    verdict = oracle_ann_verdicts(mirror, q, params)
    if task == "decision":
        return verdict.decision_correct(int(ans))
    return verdict.ann_correct(ans)


def run_game(cfg: GameConfig) -> Transcript:
    searcher = _fresh_searcher(cfg)
    mirror = Dataset(Metric.hamming(cfg.X.shape[1]), cfg.X)
    adv = cfg.adversary
    adv.reset(stream(cfg.seed, "adversary"))
    tr = Transcript()
    for t in range(1, cfg.Q + 1):
        if t in cfg.schedule:
            _apply(cfg.schedule[t], searcher, mirror)
        view = PublicView(mirror.ids, mirror.points, cfg.params, cfg.Q, cfg.task)
        q = np.asarray(adv.next_query(view, tr.history()), dtype=np.uint8)
        ans = searcher.query(q)
        ok = _judge(cfg.task, mirror, q, ans, cfg.params)
        tr.rounds.append(Round(t, q, ans, ok, getattr(searcher, "last_charge_", 0)))
        if not ok and cfg.stop_on_failure:
            break
    return tr


def replay(cfg: GameConfig, queries) -> list:
    """Answers of an identically seeded searcher to a fixed query sequence."""
    searcher = _fresh_searcher(cfg)
    mirror = Dataset(Metric.hamming(cfg.X.shape[1]), cfg.X)
    out = []
    for t, q in enumerate(queries, start=1):
        if t in cfg.schedule:
            _apply(cfg.schedule[t], searcher, mirror)
        out.append(searcher.query(np.asarray(q, dtype=np.uint8)))
    return out


# -- adversaries -----------------------------------------------------------------------


class Adversary:
    """Deterministic function of the history given its own seeded stream."""

    name = "base"

    def reset(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def next_query(self, view: PublicView, history) -> np.ndarray:
        raise NotImplementedError

    def _near_query(self, view: PublicView, base: np.ndarray | None = None) -> np.ndarray:
        """A point within ``r`` of a data point (or of ``base``)."""
        if base is None:
            base = view.points[self.rng.integers(len(view.points))]
        q = base.copy()
        flips = self.rng.choice(len(q), size=int(view.params.r), replace=False)
        q[flips] ^= 1
        return q


class ObliviousRandom(Adversary):
    """Ignores the history; each query is a random data point with ``r`` flipped bits."""

    name = "oblivious-random"

    def next_query(self, view, history):
        return self._near_query(view)


class RepeatAndPerturb(Adversary):
    """Walks around previous answers: perturb the last answered point, else restart."""

    name = "repeat-and-perturb"

    def next_query(self, view, history):
        if history:
            q, ans = history[-1]
            if view.task == "ann" and ans is not None and ans is not TIMEOUT:
                pos = np.flatnonzero(view.ids == int(ans))
                if len(pos):
                    return self._near_query(view, view.points[pos[0]])
            if self.rng.random() < 0.5:
                q = q.copy()
                q[self.rng.integers(len(q))] ^= 1
                return q
        return self._near_query(view)


class BucketProber(Adversary):
    """Locates sampled coordinates of a single-table bit-sampling index.

    Picks a target point whose ``(cr + r)``-ball holds no other point, then
    flips one coordinate at a time. A bottom answer means the flipped
    coordinate is sampled. Afterwards it keeps issuing the target with up to
    ``r`` known-sampled coordinates flipped, which misses the target's bucket.
    """

    name = "bucket-prober"

    def reset(self, rng):
        super().reset(rng)
        self.target = None
        self.sampled: list[int] = []
        self.next_coord = 0

    def _pick_target(self, view):
        cr, r = view.params.cr, view.params.r
        X = view.points.astype(np.int64)
        order = self.rng.permutation(len(X))
        for i in order:
            dist = np.abs(X - X[i]).sum(axis=1)
            dist[i] = 10**9
            if dist.min() > cr + r:
                return view.ids[i], X[i].astype(np.uint8)
        return view.ids[order[0]], X[order[0]].astype(np.uint8)

    def next_query(self, view, history):
        if self.target is None or not np.any(view.ids == self.target[0]):
            self.target = self._pick_target(view)
            self.sampled, self.next_coord = [], 0
        elif history:
            q, ans = history[-1]
            diff = np.flatnonzero(q != self.target[1])
            if len(diff) == 1 and ans is None and int(diff[0]) not in self.sampled:
                self.sampled.append(int(diff[0]))
        x = self.target[1]
        d = len(x)
        r = int(view.params.r)
        if self.next_coord < d and len(self.sampled) < r:
            q = x.copy()
            q[self.next_coord] ^= 1
            self.next_coord += 1
            return q
        q = x.copy()
        pool = self.sampled if self.sampled else list(range(d))
        flips = self.rng.choice(pool, size=min(r, len(pool)), replace=False)
        q[flips] ^= 1
        return q


class ReplayWorst(Adversary):
    """Explores a pool of near queries, then replays the one with most observed errors.

    The adversary judges answers itself from the public data. Ties go to the
    query issued least often, then to pool order.
    """

    name = "replay-worst"

    def __init__(self, pool_size: int = 10):
        self.pool_size = pool_size

    def reset(self, rng):
        super().reset(rng)
        self.pool: list[np.ndarray] = []
        self.errors: dict[bytes, int] = {}
        self.issued: dict[bytes, int] = {}
        self._seen = 0

    def next_query(self, view, history):
        if len(self.pool) < self.pool_size:
            # alternate r-near queries and far-from-everything queries
            if len(self.pool) % 2 == 0:
                q = self._near_query(view)
            else:
                q = self.rng.integers(0, 2, size=view.points.shape[1]).astype(np.uint8)
            self.pool.append(q)
            self.errors.setdefault(q.tobytes(), 0)
            self.issued.setdefault(q.tobytes(), 0)
            return q
        for q, ans in history[self._seen:]:
            kb = q.tobytes()
            if kb in self.issued:
                self.issued[kb] += 1
                self.errors[kb] += not _public_judge(view, q, ans)
        self._seen = len(history)
        keys = [q.tobytes() for q in self.pool]
        best = min(range(len(keys)), key=lambda j: (-self.errors[keys[j]], self.issued[keys[j]], j))
        return self.pool[best]


def _public_judge(view: PublicView, q, ans) -> bool:
    """Oracle verdict computed from the public view (ids need not be row positions)."""
    if ans is TIMEOUT:
        return False
    dist = np.count_nonzero(view.points != q[None, :], axis=1)
    r_near = bool((dist <= view.params.r).any())
    if view.task == "decision":
        return bool((dist <= view.params.cr).any()) if ans else not r_near
    if ans is None:
        return not r_near
    pos = np.flatnonzero(view.ids == int(ans))
    return bool(len(pos) and dist[pos[0]] <= view.params.cr)


ADVERSARIES = {
    cls.name: cls for cls in (ObliviousRandom, RepeatAndPerturb, BucketProber, ReplayWorst)
}


# -- instances and statistics -------------------------------------------------------


@dataclass(frozen=True)
class PlantedInstance:
    X: np.ndarray
    q: np.ndarray
    planted_id: int


def planted_instance(n: int, d: int, r: int, c: float, seed: int, *, dist: int | None = None) -> PlantedInstance:
    """Uniform random points plus a query at distance ``dist`` (default ``r``) from one of them.

    All other points are resampled until they lie farther than ``cr`` from the query.
    """
    rng = stream(seed, "planted")
    X = rng.integers(0, 2, size=(n, d), dtype=np.uint8)
    pid = int(rng.integers(n))
    q = X[pid].copy()
    flips = rng.choice(d, size=int(r if dist is None else dist), replace=False)
    q[flips] ^= 1
    for i in range(n):
        if i == pid:
            continue
        while np.count_nonzero(X[i] != q) <= c * r:
            X[i] = rng.integers(0, 2, size=d, dtype=np.uint8)
    return PlantedInstance(X, q, pid)


@dataclass(frozen=True)
class FairnessReport:
    ball: tuple
    counts: tuple
    statistic: float
    p_value: float
    invalid: int
    skipped: bool = False


def fairness_test(searcher, ds: Dataset, q, r: float, trials: int, rng=None) -> FairnessReport:
    """Chi-square of ``trials`` answers against the uniform law on the closed ``r``-ball.

    ``searcher`` needs ``sample_many(q, trials, rng)`` or ``query(q)``. Answers
    outside the ball (including bottom) are counted in ``invalid``.
    """
    ball = sorted(ds.ball(q, r))
    if not ball:
        warnings.warn("empty r-ball: fairness test skipped", stacklevel=2)
        return FairnessReport((), (), float("nan"), float("nan"), 0, skipped=True)
    if trials < 10 * len(ball):
        raise ValueError(f"{trials} trials is underpowered for a ball of {len(ball)}; need >= {10 * len(ball)}")
    if hasattr(searcher, "sample_many"):
        answers = np.asarray(searcher.sample_many(q, trials, rng))
    else:
        answers = np.array([-1 if (a := searcher.query(q)) is None or a is TIMEOUT else a for _ in range(trials)])
    counts = np.array([np.count_nonzero(answers == b) for b in ball])
    invalid = trials - int(counts.sum())
    if len(ball) == 1:
        return FairnessReport(tuple(ball), tuple(counts.tolist()), 0.0, 1.0, invalid)
    stat, p = chisquare(counts)
    return FairnessReport(tuple(ball), tuple(counts.tolist()), float(stat), float(p), invalid)


@dataclass(frozen=True)
class FailureEstimate:
    wins: int
    games: int
    rate: float
    ci_low: float
    ci_high: float


def failure_rate(cfg: GameConfig, games: int) -> FailureEstimate:
    """Fraction of ``games`` independent games the adversary wins, with a 95% Wilson interval."""
    wins = 0
    for g in range(games):
        sub = GameConfig(cfg.X, cfg.searcher, cfg.adversary, cfg.params, cfg.Q,
                         derive_seed(cfg.seed, "game", g), cfg.schedule, cfg.task, stop_on_failure=True)
        wins += run_game(sub).adversary_won
    ci = binomtest(wins, games).proportion_ci(confidence_level=0.95, method="wilson")
    return FailureEstimate(wins, games, wins / games, float(ci.low), float(ci.high))
