import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from oracles import brute_assignment
from store3d.assignment import greedy_assignment, greedy_match, hungarian
from store3d.errors import NonFiniteCost, ShapeMismatch

shapes = st.tuples(st.integers(1, 6), st.integers(1, 6))
costs = shapes.flatmap(lambda s: arrays(np.float64, s, elements=st.floats(-100, 100, allow_nan=False)))
int_costs = shapes.flatmap(lambda s: arrays(np.int64, s, elements=st.integers(0, 5)))


def test_classic_fixture():
    c = np.array([[4, 1, 3], [2, 0, 5], [3, 2, 2]], dtype=float)
    a = hungarian(c)
    assert a.total_cost == 5.0
    assert a.pairs == [(0, 1), (1, 0), (2, 2)]


def test_empty_and_invalid():
    assert hungarian(np.zeros((0, 3))).pairs == []
    with pytest.raises(NonFiniteCost):
        hungarian([[1.0, np.nan]])
    with pytest.raises(ShapeMismatch):
        hungarian([1.0, 2.0])


@settings(max_examples=200, deadline=None)
@given(costs)
def test_matches_enumeration(c):
    a = hungarian(c)
    assert len(a.pairs) == min(c.shape)
    assert len(set(a.rows)) == len(a.rows) and len(set(a.cols)) == len(a.cols)
    assert a.total_cost == pytest.approx(brute_assignment(c), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(costs)
def test_matches_scipy(c):
    r, k = linear_sum_assignment(c)
    assert hungarian(c).total_cost == pytest.approx(c[r, k].sum(), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(int_costs, st.randoms(use_true_random=False))
def test_row_permutation_invariant(c, rnd):
    perm = list(range(c.shape[0]))
    rnd.shuffle(perm)
    assert hungarian(c[perm]).total_cost == hungarian(c).total_cost


@settings(max_examples=100, deadline=None)
@given(costs)
def test_greedy_never_beats_optimal(c):
    assert greedy_assignment(c).total_cost >= hungarian(c).total_cost - 1e-9


def test_greedy_match_prefers_high_score():
    dets = [[0.0, 0.0], [0.1, 0.0]]
    gts = [[0.05, 0.0]]
    m = greedy_match(dets, [0.2, 0.9], gts, threshold=1.0)
    assert m == [(1, 0, pytest.approx(0.05))]


def test_greedy_match_threshold_is_strict():
    assert greedy_match([[0.0, 0.0]], [1.0], [[2.0, 0.0]], threshold=2.0) == []
    assert len(greedy_match([[0.0, 0.0]], [1.0], [[1.999, 0.0]], threshold=2.0)) == 1


def test_greedy_match_respects_classes():
    m = greedy_match([[0, 0]], [1.0], [[0, 0], [0.5, 0]], 2.0, ["car"], ["pedestrian", "car"])
    assert [(d, g) for d, g, _ in m] == [(0, 1)]


def test_greedy_match_tie_goes_to_lower_index():
    m = greedy_match([[0, 0], [0, 0]], [0.5, 0.5], [[0, 0]], 1.0)
    assert m[0][0] == 0
