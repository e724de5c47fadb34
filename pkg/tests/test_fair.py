import numpy as np
import pytest
from scipy.stats import chisquare

from robann.budget import TIMEOUT, WorkBudget
from robann.fair import FairIndex, FairLSH, fair_query
from robann.metric import Dataset, Metric, ProblemParams
from robann.rng import stream


def _ball_instance(size, d=16, n=120, r=2, seed=0):
    """Random data plus ``size`` points within ``r`` of q and the rest beyond 2cr."""
    rng = np.random.default_rng(seed)
    q = rng.integers(0, 2, size=d).astype(np.uint8)
    X = []
    for i in range(size):
        p = q.copy()
        p[rng.choice(d, size=min(i % (r + 1), r), replace=False)] ^= 1
        X.append(p)
    while len(X) < n:
        p = rng.integers(0, 2, size=d).astype(np.uint8)
        if np.count_nonzero(p != q) > 2 * r:
            X.append(p)
    X = np.array(X)
    perm = rng.permutation(n)
    return X[perm], q


@pytest.mark.parametrize("size", [1, 2, 5])
def test_uniform_over_ball(size):
    X, q = _ball_instance(size, seed=size)
    est = FairLSH(c=2, r=2, Q=10_000, seed=3).fit(X)
    ball = sorted(est.dataset_.ball(q, 2))
    assert len(ball) == size
    out = est.sample_many(q, 10_000)
    assert set(out.tolist()) <= set(ball)
    if size > 1:
        counts = [np.count_nonzero(out == b) for b in ball]
        assert chisquare(counts).pvalue > 1e-3


def test_three_point_ball_query_path():
    X, q = _ball_instance(3, seed=11)
    est = FairLSH(c=2, r=2, Q=10_000, seed=4).fit(X)
    answers = [est.query(q) for _ in range(3000)]
    ball = sorted(est.dataset_.ball(q, 2))
    assert set(answers) <= set(ball)
    assert chisquare([answers.count(b) for b in ball]).pvalue > 1e-3


def test_empty_balls_give_bottom():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 2, size=(50, 16)).astype(np.uint8)
    q = rng.integers(0, 2, size=16).astype(np.uint8)
    keep = (X != q).sum(axis=1) > 4
    est = FairLSH(c=2, r=2, seed=0).fit(X[keep])
    assert est.query(q) is None


def test_answers_always_within_r():
    rng = np.random.default_rng(2)
    X = rng.integers(0, 2, size=(150, 12)).astype(np.uint8)
    est = FairLSH(c=2, r=2, Q=100, seed=5).fit(X)
    for q in rng.integers(0, 2, size=(100, 12)):
        a = est.query(q)
        assert a is None or np.count_nonzero(X[a] != q) <= 2


def test_budget_timeout_and_charge_reproducible():
    X, q = _ball_instance(2, seed=3)
    fi = FairIndex.build(Dataset(Metric.hamming(16), X), ProblemParams(2, 2, 100), seed=9)
    b = WorkBudget(fi.index.L)
    assert fi.query(q, stream(1, "q"), b) is TIMEOUT
    assert b.spent == b.limit
    b1, b2 = WorkBudget(), WorkBudget()
    a1 = fair_query(fi, q, stream(2, "q"), b1)
    a2 = fair_query(fi, q, stream(2, "q"), b2)
    assert a1 == a2 and b1.spent == b2.spent > fi.index.L


def test_exhaustive_fallback_still_uniform():
    X, q = _ball_instance(2, seed=4)
    fi = FairIndex.build(Dataset(Metric.hamming(16), X), ProblemParams(2, 2), seed=1, reject_const=1e-9)
    assert fi.max_rejections == 1
    out = fi.sample_many(q, 4000, stream(0, "fb"))
    ball = sorted(Dataset(Metric.hamming(16), X).ball(q, 2))
    assert set(out.tolist()) <= set(ball)
    assert chisquare([np.count_nonzero(out == b) for b in ball]).pvalue > 1e-3


def test_insert_then_uniform_and_delete_sole_neighbor():
    X, q = _ball_instance(2, seed=5)
    est = FairLSH(c=2, r=2, Q=10_000, seed=6).fit(X)
    p = q.copy()
    p[0] ^= 1
    new = est.insert(p)
    ball = sorted(est.dataset_.ball(q, 2))
    assert new in ball and len(ball) == 3
    out = est.sample_many(q, 6000)
    assert chisquare([np.count_nonzero(out == b) for b in ball]).pvalue > 1e-3
    for b in ball:
        est.delete(b)
    a = est.query(q)
    assert a is None or np.count_nonzero(est.dataset_.point(a) != q) <= 4


def test_per_query_streams_differ_from_setup():
    X, q = _ball_instance(5, seed=6)
    est = FairLSH(c=2, r=2, Q=100, seed=7).fit(X)
    first = [est.query(q) for _ in range(20)]
    again = FairLSH(c=2, r=2, Q=100, seed=7).fit(X)
    assert [again.query(q) for _ in range(20)] == first
    assert len(set(first)) > 1
