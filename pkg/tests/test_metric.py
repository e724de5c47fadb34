import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robann.metric import (
    Dataset,
    Metric,
    Point,
    ProblemParams,
    ball,
    distance,
    oracle_ann_verdicts,
    pack_bits,
    read_dataset,
    write_dataset,
)


def test_distance_examples():
    assert distance(Point.hamming("0000"), Point.hamming("0000")) == 0
    assert distance(Point.hamming("0011"), Point.hamming("0101")) == 2
    assert distance(Point.lp([0, 0]), Point.lp([3, 4])) == 5


def test_distance_rejects_mismatch():
    with pytest.raises(ValueError):
        distance(Point.hamming("01"), Point.hamming("011"))
    with pytest.raises(ValueError):
        distance(Point.hamming("01"), Point.lp([0.0, 1.0]))


def test_hamming_coordinates_checked():
    with pytest.raises(ValueError):
        Point.hamming([0, 2])


def test_lp_special_cases():
    a, b = np.array([1.0, -2.0, 0.5]), np.array([0.0, 1.0, 0.5])
    assert Metric.lp(3, 1).distance(a, b) == 4
    assert Metric.lp(3, np.inf).distance(a, b) == 3
    assert Metric.lp(3, 3).distance(a, b) == pytest.approx((1 + 27) ** (1 / 3))


def test_pack_bits_popcount_matches_count():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 2, size=(50, 130))
    q = rng.integers(0, 2, size=130)
    words = pack_bits(X)
    assert words.shape == (50, 3)
    got = np.bitwise_count(words ^ pack_bits(q[None])).sum(axis=1)
    assert np.array_equal(got, (X != q).sum(axis=1))


def test_ball_examples():
    ds = Dataset(Metric.hamming(1), [[0], [1]])
    assert ball(ds, Point.hamming("0"), 0) == {0}
    square = Dataset(Metric.hamming(2), [[0, 0], [0, 1], [1, 0], [1, 1]])
    assert ball(square, Point.hamming("00"), 1) == {0, 1, 2}
    assert ball(Dataset(Metric.hamming(3)), Point.hamming("000"), 3) == set()


def test_dataset_ids_stable():
    ds = Dataset(Metric.hamming(3), [[0, 0, 0], [1, 1, 1]])
    i = ds.insert([1, 0, 0])
    assert i == 2
    ds.delete(0)
    assert len(ds) == 2
    assert ds.insert([0, 1, 0]) == 3
    assert list(ds.ids) == [1, 2, 3]
    with pytest.raises(KeyError):
        ds.delete(0)


def test_problem_params_validation():
    ProblemParams(2, 1, 1, 0.0025)
    for bad in [dict(c=1.0, r=1), dict(c=2, r=0), dict(c=2, r=1, Q=0), dict(c=2, r=1, delta=0.01)]:
        with pytest.raises(ValueError):
            ProblemParams(**bad)


def test_verdicts():
    ds = Dataset(Metric.hamming(8), [[0] * 8])
    params = ProblemParams(2, 2)
    near = oracle_ann_verdicts(ds, np.array([1, 1] + [0] * 6), params)
    assert near.r_nonempty and near.ann_correct(0) and not near.ann_correct(None)
    far = oracle_ann_verdicts(ds, np.ones(8, dtype=np.uint8), params)
    assert not far.r_nonempty and not far.cr_nonempty
    assert far.ann_correct(None) and far.decision_correct(0) and not far.decision_correct(1)
    mid = oracle_ann_verdicts(ds, np.array([1, 1, 1] + [0] * 5), params)
    assert mid.decision_correct(0) and mid.decision_correct(1)


def test_dataset_text_roundtrip():
    text = "hamming 4 3\n0 0 1 1\n1 1 1 1\n0 1 0 1\n"
    ds = read_dataset(io.StringIO(text))
    assert write_dataset(ds) == text
    lp = Dataset(Metric.lp(2, 2), [[0.1, -3.5], [1e-17, 2.0]])
    again = read_dataset(io.StringIO(write_dataset(lp)))
    assert np.array_equal(again.points, lp.points)
    with pytest.raises(ValueError):
        read_dataset(io.StringIO("hamming 4 2\n0 0 1 1\n"))


triples = st.integers(1, 40).flatmap(
    lambda d: st.tuples(*[st.lists(st.integers(0, 1), min_size=d, max_size=d)] * 3)
)


@given(triples)
@settings(max_examples=300, deadline=None)
def test_hamming_triangle_inequality(t):
    a, b, c = (np.array(x, dtype=np.uint8) for x in t)
    m = Metric.hamming(len(a))
    assert m.distance(a, c) <= m.distance(a, b) + m.distance(b, c)


def test_triangle_inequality_bulk_both_modes():
    rng = np.random.default_rng(1)
    A, B, C = (rng.integers(0, 2, size=(10_000, 24)) for _ in range(3))
    h = lambda x, y: (x != y).sum(axis=1)
    assert np.all(h(A, C) <= h(A, B) + h(B, C))
    A, B, C = (rng.normal(size=(10_000, 5)) for _ in range(3))
    for p in (1, 2, 3.5):
        dist = lambda x, y: (np.abs(x - y) ** p).sum(axis=1) ** (1 / p)
        assert np.all(dist(A, C) <= dist(A, B) + dist(B, C) + 1e-12)


def test_ball_nested_and_verdict_deterministic():
    rng = np.random.default_rng(2)
    ds = Dataset(Metric.hamming(12), rng.integers(0, 2, size=(60, 12)))
    params = ProblemParams(2, 2)
    for q in rng.integers(0, 2, size=(50, 12)):
        assert ds.ball(q, 2) <= ds.ball(q, 4)
        assert oracle_ann_verdicts(ds, q, params) == oracle_ann_verdicts(ds, q, params)
