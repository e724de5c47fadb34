import itertools
import math

import numpy as np
import pytest

from robann.forall import NOT_COVERED, Covering, DiscretizedANN, ForAllHammingANN, forall_params, rho_prime
from robann.metric import Dataset, Metric, ProblemParams, oracle_ann_verdicts
from robann.rng import stream


def _all_queries(d):
    return np.array(list(itertools.product([0, 1], repeat=d)), dtype=np.uint8)


def test_forall_params_satisfy_union_bound():
    for n, d in [(32, 8), (64, 10), (16, 6)]:
        lp = forall_params(n, d, 1, 2)
        assert lp.k_concat == math.ceil(math.log(n) / math.log(1 / lp.p2) - 1e-12)
        assert lp.L_tables == math.ceil(n ** 0.5 * d * math.log(n) - 1e-9)
        assert lp.L_tables * math.log1p(-lp.p1**lp.k_concat) <= -(2 * math.log(n) + d * math.log(2))
    assert forall_params(32, 8, 1, 2, rho_mode="hamming_opt").rho == pytest.approx(1 / 3)


def test_forall_params_reject_undersized():
    with pytest.raises(ValueError):
        forall_params(1, 8, 1, 2)
    with pytest.raises(ValueError):
        forall_params(32, 8, 1, 2, table_const=0.01)
    with pytest.raises(ValueError):
        forall_params(32, 8, 1, 2, rho_mode="l2_opt")


def test_forall_exhaustive_small_cube():
    d, n = 8, 32
    X = stream(0, "forall-data").integers(0, 2, size=(n, d), dtype=np.uint8)
    est = ForAllHammingANN(c=2, r=1, seed=3).fit(X)
    ds, params = Dataset(Metric.hamming(d), X), ProblemParams(2, 1)
    for q in _all_queries(d):
        assert oracle_ann_verdicts(ds, q, params).ann_correct(est.query(q))


def test_sampled_query_valid_and_mostly_agrees():
    d, n = 10, 48
    X = stream(1, "forall-data").integers(0, 2, size=(n, d), dtype=np.uint8)
    est = ForAllHammingANN(c=2, r=1, seed=4).fit(X)
    ds, params = Dataset(Metric.hamming(d), X), ProblemParams(2, 1)
    qs = _all_queries(d)
    agree = 0
    for q in qs:
        a = est.query_sampled(q)
        assert oracle_ann_verdicts(ds, q, params).ann_correct(a)
        agree += (a is None) == (est.query(q) is None)
    assert agree / len(qs) >= 0.95
    assert est.n_probes_ < est.index_.L


def test_forall_predict_codes():
    X = np.array([[0, 0, 0, 0, 0, 0], [1, 1, 1, 1, 1, 1]] * 2, dtype=np.uint8)
    est = ForAllHammingANN(c=2, r=1, seed=0).fit(X)
    out = est.predict(X[:2])
    assert out.shape == (2,) and np.all(out >= 0)


def test_rho_prime_values():
    assert rho_prime(2) == pytest.approx(0.2857142857142857, rel=1e-14)
    assert rho_prime(4) == pytest.approx(0.08180300500834725, rel=1e-14)
    assert rho_prime(10) == pytest.approx(0.02531645569620253, rel=1e-14)
    # Delta = cr/10 gives c' = 9c/(10 + c) and rho' = 1/(2c'^2 - 1)
    for c in (1.5, 3.0, 7.0):
        cp = 9 * c / (10 + c)
        assert rho_prime(c) == pytest.approx(1 / (2 * cp**2 - 1), rel=1e-12)


def test_grid_cover_count_and_snap_distance():
    d = 5
    cov = Covering("grid", d, 0.5 * math.sqrt(d), 2.0, C=1.0)
    assert cov.m == 2 and round(math.exp(cov.log_count)) == 32
    centers = {tuple(cov.snap(q)) for q in stream(2, "g").uniform(-1, 1, size=(4000, d))}
    assert len(centers) == 32
    assert cov.log_count <= cov.log_size_bound + 1e-12


@pytest.mark.parametrize("p", [1.0, 2.0, np.inf])
def test_grid_snap_within_delta(p):
    d, delta = 3, 0.3
    cov = Covering("grid", d, delta, p, C=2.0)
    metric = Metric.lp(d, p)
    for q in stream(3, "g").uniform(-2, 2, size=(10_000, d)):
        assert metric.distance(q, cov.snap(q)) <= delta * (1 + 1e-12)
    assert cov.snap(np.full(d, 2.5)) is NOT_COVERED


def test_data_dependent_snap():
    rng = stream(4, "dd")
    anchors = rng.normal(size=(20, 3))
    cov = Covering("data_dependent", 3, 0.2, 2.0, anchors=anchors, r=0.5)
    metric = Metric.lp(3, 2.0)
    for _ in range(2000):
        a = anchors[rng.integers(20)]
        u = rng.normal(size=3)
        q = a + u / np.linalg.norm(u) * rng.uniform(0, 0.5)
        assert metric.distance(q, cov.snap(q)) <= 0.2 * (1 + 1e-12)
    assert cov.snap(np.full(3, 50.0)) is NOT_COVERED


def test_cover_cap_enforced():
    with pytest.raises(ValueError):
        Covering("grid", 20, 0.01, 2.0, C=1.0, cell_cap=1e6)
    with pytest.raises(ValueError):
        Covering("cube", 2, 0.1)


def test_discretized_planted_and_empty():
    rng = stream(5, "disc")
    c, r = 2.0, 1.0
    for _ in range(50):
        X = rng.uniform(-4, 4, size=(40, 2))
        q = X[0] + 0.9 * r * np.array([1.0, 0.0])
        q = np.clip(q, -4, 4)
        est = DiscretizedANN(c=c, r=r, C=4.0).fit(X)
        a = est.query(q)
        assert a is not None and np.linalg.norm(X[a] - q) <= c * r + 1e-12
    far = DiscretizedANN(c=c, r=r, C=4.0).fit(np.array([[3.5, 3.5], [-3.5, -3.5]]))
    assert far.query(np.zeros(2)) is None
    with pytest.raises(ValueError):
        far.query(np.array([5.0, 0.0]))


def test_discretized_parameters():
    est = DiscretizedANN(c=2.0, r=1.0, C=1.0).fit(np.zeros((1, 2)))
    assert est.delta_ == pytest.approx(0.2)
    assert est.c_inner_ * est.r_inner_ == pytest.approx(2.0 - 0.2)
    with pytest.raises(ValueError):
        DiscretizedANN(c=2.0, r=1.0, delta_cover=0.5, C=1.0).fit(np.zeros((1, 2)))


def test_discretized_data_dependent_fallback():
    X = np.array([[0.0, 0.0], [10.0, 10.0]])
    est = DiscretizedANN(c=3.0, r=1.0, mode="data_dependent").fit(X)
    q = np.array([1.5, 0.0])  # beyond r of every anchor but within cr of the first point
    assert est.query(q) == 0
    assert est.last_snap_ is NOT_COVERED
    assert est.query(np.array([0.5, 0.0])) == 0
    assert est.last_snap_ is not NOT_COVERED
    assert est.query(np.array([5.0, 5.0])) is None
