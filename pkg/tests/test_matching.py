import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coal.matching import Box, iou, iou_matrix, linear_assignment
from oracles import best_full_assignment, best_partial_assignment, box_iou

unit = st.floats(0.0, 1.0, allow_nan=False)
boxes = st.builds(Box, unit, unit, st.floats(0.0, 0.6), st.floats(0.0, 0.6))


def test_box_corners():
    b = Box.from_xyxy(0.1, 0.2, 0.5, 0.6)
    assert (b.x1, b.y1, b.x2, b.y2) == pytest.approx((0.1, 0.2, 0.5, 0.6))
    assert Box.from_tlwh(*b.tlwh()) == pytest.approx(b)
    with pytest.raises(ValueError):
        Box(0.5, 0.5, -0.1, 0.2)


def test_iou_examples():
    b = Box(0.4, 0.4, 0.2, 0.3)
    assert iou(b, b) == 1.0
    assert iou(Box(0.1, 0.1, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0
    assert iou(Box(0.25, 0.25, 0.5, 0.5), Box(0.5, 0.5, 0.5, 0.5)) == pytest.approx(0.0625 / 0.4375, abs=1e-6)
    assert iou(Box(0.5, 0.5, 0.0, 0.0), Box(0.5, 0.5, 0.0, 0.0)) == 0.0


@settings(max_examples=200)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


# corner widths x2 - x1 lose relative precision on very thin boxes, so the
# two formulas are only compared where that cancellation is negligible
sized = st.builds(Box, unit, unit, st.floats(0.01, 0.6), st.floats(0.01, 0.6))


@settings(max_examples=200)
@given(sized, sized)
def test_iou_matches_corner_formula(a, b):
    assert iou(a, b) == pytest.approx(box_iou((a.x1, a.y1, a.x2, a.y2), (b.x1, b.y1, b.x2, b.y2)), abs=1e-12)


def test_iou_matrix_shape():
    assert iou_matrix([], [Box(0.5, 0.5, 0.1, 0.1)]).shape == (0, 1)


# ---- assignment -----------------------------------------------------------


def test_assignment_small_cases():
    cost = 1.0 - np.eye(3)
    result = linear_assignment(cost)
    assert result.pairs == [(0, 0), (1, 1), (2, 2)]
    assert result.total_cost == 0.0
    single = linear_assignment([[2.5]])
    assert single.pairs == [(0, 0)] and single.total_cost == 2.5


@pytest.mark.parametrize("shape", [(0, 0), (0, 3), (4, 0)])
def test_assignment_empty(shape):
    result = linear_assignment(np.zeros(shape))
    assert result.pairs == []
    assert result.unmatched_rows == list(range(shape[0]))
    assert result.unmatched_columns == list(range(shape[1]))


def test_assignment_rejects_non_finite_and_bad_shapes():
    with pytest.raises(ValueError):
        linear_assignment([[np.inf, 1.0]])
    with pytest.raises(ValueError):
        linear_assignment(np.zeros(3))
    with pytest.raises(ValueError):
        linear_assignment(np.zeros((2, 2)), forbidden=np.zeros((3, 2), dtype=bool))


def test_maximize_equals_minimizing_negation(rng):
    cost = rng.uniform(size=(4, 6))
    assert linear_assignment(cost, maximize=True).pairs == linear_assignment(-cost).pairs


def test_ties_pick_smallest_pair_list():
    assert linear_assignment(np.zeros((3, 3))).pairs == [(0, 0), (1, 1), (2, 2)]
    assert linear_assignment(np.zeros((2, 4))).pairs == [(0, 0), (1, 1)]
    assert linear_assignment(np.zeros((4, 2))).pairs == [(0, 0), (1, 1)]
    # both anti-diagonal and diagonal cost 2; diagonal sorts first
    assert linear_assignment(np.array([[1.0, 1.0], [1.0, 1.0]])).pairs == [(0, 0), (1, 1)]


def test_forbidden_entries_are_never_used():
    cost = np.array([[0.0, 5.0], [0.0, 5.0]])
    forbidden = np.array([[False, True], [False, True]])
    result = linear_assignment(cost, forbidden=forbidden)
    assert result.pairs == [(0, 0)]
    assert result.unmatched_rows == [1] and result.unmatched_columns == [1]


def test_forbidden_does_not_distort_optimum():
    # with a large finite sentinel this would prefer one cheap pair plus a sentinel
    cost = np.array([[1.0, 2.0], [3.0, 100.0]])
    forbidden = np.array([[False, False], [False, True]])
    assert linear_assignment(cost, forbidden=forbidden).pairs == [(0, 1), (1, 0)]


@settings(max_examples=150, deadline=None)
@given(m=st.integers(1, 6), n=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_assignment_matches_permutation_oracle(m, n, seed):
    cost = np.random.default_rng(seed).uniform(-1, 1, size=(m, n))
    result = linear_assignment(cost)
    pairs, total = best_full_assignment(cost)
    assert result.total_cost == total
    assert result.pairs == pairs
    assert len({r for r, _ in result.pairs}) == len(result.pairs) == min(m, n)
    assert len({c for _, c in result.pairs}) == len(result.pairs)


@settings(max_examples=150, deadline=None)
@given(m=st.integers(1, 5), n=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_integer_ties_match_oracle(m, n, seed):
    cost = np.random.default_rng(seed).integers(0, 3, size=(m, n)).astype(float)
    assert linear_assignment(cost).pairs == best_full_assignment(cost)[0]


@settings(max_examples=150, deadline=None)
@given(m=st.integers(1, 4), n=st.integers(1, 4), density=st.floats(0.0, 1.0), seed=st.integers(0, 2**31))
def test_forbidden_matches_partial_oracle(m, n, density, seed):
    r = np.random.default_rng(seed)
    cost = r.integers(0, 4, size=(m, n)).astype(float)
    forbidden = r.random((m, n)) < density
    result = linear_assignment(cost, forbidden=forbidden)
    pairs, total = best_partial_assignment(cost, forbidden)
    assert result.pairs == pairs
    assert result.total_cost == total
    assert all(not forbidden[r_, c_] for r_, c_ in result.pairs)
    assert sorted(result.unmatched_rows + [p[0] for p in pairs]) == list(range(m))
