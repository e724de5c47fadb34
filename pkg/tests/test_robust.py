import math

import numpy as np
import pytest
from scipy.stats import chisquare

from robann.harness import planted_instance
from robann.lsh import RHO_FUNCTIONS
from robann.metric import Dataset, Metric
from robann.rng import stream
from robann.robust import (
    AnnuliANN,
    BucketedANN,
    MedianAnnuliANN,
    QueryBudgetExceeded,
    RelaxedFairANN,
    RobustDecider,
    annulus_counts,
    annulus_radii,
    exponent_optimize,
    has_good_annulus,
    median_amplify,
)


def _far_instance(n=60, d=24, cr=4, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.integers(0, 2, size=d).astype(np.uint8)
    X = rng.integers(0, 2, size=(n, d)).astype(np.uint8)
    X = X[(X != q).sum(axis=1) > cr]
    return X, q


def test_decider_far_query_answers_zero():
    X, q = _far_instance()
    zeros = 0
    for t in range(1000):
        est = RobustDecider(c=2, r=2, Q=1, n_copies=50, k_sub=50, seed=t) if t < 20 else est
        if t >= 20:
            est.core_.n_queries = 0
        else:
            est.fit(X)
        zeros += est.decide(q) == 0
    assert zeros >= 990


def test_decider_threshold_without_noise():
    inst = planted_instance(64, 24, 2, 2, 1)
    est = RobustDecider(c=2, r=2, Q=50, n_copies=16, k_sub=7, noise=False, seed=2).fit(inst.X)
    for _ in range(50):
        bit = est.decide(inst.q)
        assert bit == int(est.core_.last_vote > 0.5)
        assert est.core_.last_noisy == est.core_.last_vote


def test_decider_common_answer_flip_rate():
    # d=1 data: every copy agrees, so only the noise can flip the output
    X = np.array([[0], [0]])
    est = RobustDecider(c=2, r=0.25, Q=4000, n_copies=8, k_sub=10, seed=3).fit(X)
    flips = sum(est.decide(np.array([0])) != 1 for _ in range(4000))
    assert flips / 4000 <= 0.5 * math.exp(-10 * 0.5) + 3 * math.sqrt(0.0034 / 4000)


def test_decider_query_budget():
    inst = planted_instance(32, 16, 2, 2, 2)
    est = RobustDecider(c=2, r=2, Q=2, n_copies=4, k_sub=4, seed=0).fit(inst.X)
    est.decide(inst.q)
    est.decide(inst.q)
    with pytest.raises(QueryBudgetExceeded):
        est.decide(inst.q)


def test_decider_default_constants_lazy():
    inst = planted_instance(32, 16, 2, 2, 3)
    est = RobustDecider(c=2, r=2, Q=1, delta=0.001, seed=0).fit(inst.X)
    assert est.n_copies_ == 61622 and est.k_sub_ == 277
    assert est.decide(inst.q) == 1
    assert len(est.core_._copies) <= est.k_sub_


def test_decider_updates():
    inst = planted_instance(40, 16, 2, 2, 4)
    est = RobustDecider(c=2, r=2, Q=10, n_copies=8, k_sub=16, seed=1).fit(inst.X)
    est.delete(inst.planted_id)
    assert est.decide(inst.q) == 0
    new = est.insert(inst.q)
    assert est.decide(inst.q) == 1
    est.delete(new)
    assert est.decide(inst.q) == 0


class _Stub:
    """Oracle decider over one segment."""

    def __init__(self, core):
        self.core = core
        self.k_sub = 1

    def decide(self, q, rng):
        X, _ = self.core.members.arrays()
        return int(len(X) > 0 and ((X != q).sum(axis=1) <= self.core.problem.cr).any())

    def insert(self, x, id_):
        pass

    def delete(self, id_):
        pass


def test_bucketed_with_oracle_stubs():
    inst = planted_instance(200, 24, 2, 2, 5)
    est = BucketedANN(c=2, r=2, deciders=lambda s, core: _Stub(core), seed=0).fit(inst.X)
    assert est.kappa_ > 3
    seg_of = est.owner_[inst.planted_id]
    assert est.query(inst.q) == inst.planted_id
    assert 0 <= seg_of < est.kappa_


def test_bucketed_segments_partition():
    X = np.random.default_rng(6).integers(0, 2, size=(100, 20))
    est = BucketedANN(c=2, r=2, n_copies=4, k_sub=4, seed=0).fit(X)
    ids = [i for m in est.segments_ for i in m.pts]
    assert ids == list(range(100))
    assert 0.5 < est.alpha_ < 1
    assert est.kappa_ == math.ceil(100 ** (1 - est.alpha_))


def test_bucketed_empty_and_updates():
    est = BucketedANN(c=2, r=2, n_copies=4, k_sub=4, Q=5, seed=0).fit(np.zeros((0, 16)))
    assert est.query(np.zeros(16, dtype=np.uint8)) is None
    inst = planted_instance(50, 16, 2, 2, 7)
    est = BucketedANN(c=2, r=2, n_copies=8, k_sub=16, Q=5, noise=False, seed=0).fit(inst.X)
    sizes = [len(m) for m in est.segments_]
    new = est.insert(inst.q)
    assert est.owner_[new] == int(np.argmin(sizes))
    est.delete(new)
    with pytest.raises(KeyError):
        est.delete(new)


def test_bucketed_planted_monte_carlo():
    misses = 0
    for s in range(30):
        inst = planted_instance(150, 24, 2, 2, 100 + s)
        est = BucketedANN(c=2, r=2, n_copies=16, k_sub=16, seed=s).fit(inst.X)
        a = est.query(inst.q)
        if a is None:
            misses += 1
        else:
            assert np.count_nonzero(inst.X[a] != inst.q) <= 4
    assert misses <= 3


def test_annulus_radii():
    radii = annulus_radii(2.0, 3.0, 4)
    assert radii[0] == 2.0 and radii[-1] == 6.0
    assert np.allclose(radii[1:] / radii[:-1], 3 ** 0.25, rtol=1e-12)


def test_telescoping_random_instances():
    rng = np.random.default_rng(8)
    for _ in range(200):
        X = rng.integers(0, 2, size=(rng.integers(5, 80), 12))
        ds = Dataset(Metric.hamming(12), X)
        q = X[0].copy()
        q[rng.integers(12)] ^= 1
        for k in (2, 3, 4):
            assert has_good_annulus(ds, q, 2, 3, k)
    counts = annulus_counts(Dataset(Metric.hamming(4), [[0, 0, 0, 0], [1, 1, 1, 1]]), np.zeros(4), 1, 4, 2)
    assert counts == [1, 1, 2]


def test_annuli_validity_and_none_when_far():
    inst = planted_instance(128, 24, 2, 2, 9)
    est = AnnuliANN(c=2, r=2, Q=20, n_annuli=2, eta=0.05, good_threshold=0.9, pool_size=8, n_samples=8,
                    seed=1).fit(inst.X)
    a = est.query(inst.q)
    assert a is not None and np.count_nonzero(inst.X[a] != inst.q) <= 4
    X, q = _far_instance(n=60, d=24)
    far = AnnuliANN(c=2, r=2, Q=5, n_annuli=2, eta=0.05, good_threshold=0.9, pool_size=8, n_samples=8,
                    trunc_const=1e-3, seed=2).fit(X)
    assert far.query(q) is None


def test_annuli_budget_and_estimates():
    inst = planted_instance(64, 20, 2, 2, 10)
    est = AnnuliANN(c=2, r=2, Q=1, n_annuli=2, pool_size=4, n_samples=4, seed=0).fit(inst.X)
    noisy, raw, charge = est.annulus_estimates(inst.q)
    assert noisy.shape == raw.shape == (2,) and charge > 0
    est.query(inst.q)
    with pytest.raises(QueryBudgetExceeded):
        est.query(inst.q)


def test_annuli_full_size_defaults():
    inst = planted_instance(32, 16, 2, 2, 11)
    est = AnnuliANN(c=2, r=2, Q=1, n_annuli=2, seed=0).fit(inst.X)
    log_term = math.log(2 / 0.0025)
    assert est.n_samples_ == math.ceil(2 / 0.001 * log_term)
    assert est.pool_size_ == math.ceil(log_term / 0.001**2) * math.ceil(2400 * math.log(400) ** 1.5 * math.sqrt(2))


def test_relaxed_uniform_within_answering_annulus():
    d, r = 16, 2
    rng = np.random.default_rng(12)
    q = rng.integers(0, 2, size=d).astype(np.uint8)
    pts = []
    for flips in ([0], [1, 2], [3, 4]):
        p = q.copy()
        p[flips] ^= 1
        pts.append(p)
    while len(pts) < 60:
        p = rng.integers(0, 2, size=d).astype(np.uint8)
        if np.count_nonzero(p != q) > 5:
            pts.append(p)
    X = np.array(pts)
    est = RelaxedFairANN(c=2, r=r, Q=10_000, n_annuli=1, seed=3).fit(X)
    answers, annuli = [], []
    for _ in range(3000):
        answers.append(est.query(q))
        annuli.append(est.last_annulus_)
    assert set(annuli) == {1}
    ball = sorted(est.dataset_.ball(q, r))
    assert chisquare([answers.count(b) for b in ball]).pvalue > 1e-3


def test_relaxed_answers_planted():
    hits = 0
    for s in range(20):
        inst = planted_instance(100, 24, 2, 2, 200 + s)
        est = RelaxedFairANN(c=2, r=2, Q=10, n_annuli=2, seed=s).fit(inst.X)
        a = est.query(inst.q)
        hits += a is not None
        assert a is None or np.count_nonzero(inst.X[a] != inst.q) <= 4
    assert hits >= 18


class _Timed:
    def __init__(self, answer, charge):
        self.answer, self.charge = answer, charge

    def query_with_charge(self, q, rng):
        return self.answer, self.charge


def test_median_amplify():
    assert median_amplify([_Timed(3, 10)], None, None) == (3, 10)
    assert median_amplify([_Timed(1, 5), _Timed(2, 10**9), _Timed(3, 7)], None, None) == (3, 7)
    with pytest.raises(ValueError):
        median_amplify([_Timed(1, 1), _Timed(2, 2)], None, None)


def test_median_annuli_estimator():
    inst = planted_instance(64, 20, 2, 2, 13)
    params = dict(c=2, r=2, Q=5, n_annuli=2, eta=0.05, good_threshold=0.9, pool_size=4, n_samples=4)
    est = MedianAnnuliANN(t=3, annuli_params=params, seed=1).fit(inst.X)
    assert est.get_params()["t"] == 3
    a = est.query(inst.q)
    assert a is None or np.count_nonzero(inst.X[a] != inst.q) <= 4


def test_exponent_optimizer_values():
    assert exponent_optimize(10).beta == 1 / 3
    assert exponent_optimize(4).k_continuous == pytest.approx(2.48, abs=0.01)
    assert exponent_optimize(100).beta < exponent_optimize(10).beta
    rep = exponent_optimize(4, "l2_opt")
    assert rep.k_star == 4


def test_exponent_optimizer_matches_grid():
    rng = np.random.default_rng(14)
    for c in rng.uniform(1.05, 60, size=50):
        for name, rho in RHO_FUNCTIONS.items():
            vals = [max(rho(c ** (1 / k)), 1 / k) for k in range(1, 65)]
            rep = exponent_optimize(c, name)
            assert rep.beta == min(vals)
            assert rep.k_star == int(np.argmin(vals)) + 1


def test_determinism_of_composites():
    inst = planted_instance(64, 20, 2, 2, 15)
    a = [BucketedANN(c=2, r=2, Q=3, n_copies=8, k_sub=8, seed=5).fit(inst.X) for _ in range(2)]
    assert [a[0].query(inst.q) for _ in range(3)] == [a[1].query(inst.q) for _ in range(3)]
    rng_a, rng_b = stream(1, "x"), stream(1, "x")
    e = [AnnuliANN(c=2, r=2, Q=2, pool_size=4, n_samples=4, seed=6).fit(inst.X) for _ in range(2)]
    assert np.array_equal(e[0].annulus_estimates(inst.q, rng_a)[0], e[1].annulus_estimates(inst.q, rng_b)[0])
