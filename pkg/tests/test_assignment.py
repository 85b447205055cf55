import itertools
import math

import numpy as np
import pytest

from conceptseg.core import Assignment, CostMatrix, InvalidCostError, hungarian_assign


def brute_force_assign(values, tol=1e-9):
    """Enumerate every one-to-one matching of size min(rows, cols).

    Returns (pairs, total) where the total is the exact minimum (fsum) and
    the pairs are the lexicographically smallest sequence among matchings
    within `tol` of it.
    """
    values = np.asarray(values, dtype=np.float64)
    rows, cols = values.shape
    k = min(rows, cols)
    best_total = None
    candidates = []
    for row_subset in itertools.combinations(range(rows), k):
        for col_perm in itertools.permutations(range(cols), k):
            pairs = tuple(zip(row_subset, col_perm))
            total = math.fsum(values[r, c] for r, c in pairs)
            candidates.append((total, pairs))
            if best_total is None or total < best_total:
                best_total = total
    scale = max(1.0, float(np.abs(values).max()))
    near = [p for t, p in candidates if t <= best_total + tol * scale]
    return min(near), best_total


class TestHungarianExamples:
    def test_identity_3x3(self):
        cost = np.ones((3, 3)) - np.eye(3)
        a = hungarian_assign(cost)
        assert a.pairs == ((0, 0), (1, 1), (2, 2))
        assert a.total_cost == 0.0

    def test_single_row_argmin(self):
        a = hungarian_assign(np.array([[5.0, 1.0, 7.0]]))
        assert a.pairs == ((0, 1),)
        assert a.total_cost == 1.0

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidCostError):
            hungarian_assign(np.array([[1.0, np.inf]]))
        with pytest.raises(InvalidCostError):
            CostMatrix(np.array([[np.nan]]))

    def test_empty_dimensions(self):
        assert hungarian_assign(np.zeros((0, 3))).pairs == ()
        assert hungarian_assign(np.zeros((3, 0))).total_cost == 0.0

    def test_pairs_must_be_distinct(self):
        with pytest.raises(ValueError):
            Assignment(pairs=((0, 0), (0, 1)), total_cost=0.0)


class TestTieBreaking:
    def test_uniform_matrix_picks_diagonal(self):
        # every matching ties; the lexicographically smallest is the diagonal
        a = hungarian_assign(np.ones((4, 4)))
        assert a.pairs == ((0, 0), (1, 1), (2, 2), (3, 3))

    def test_two_way_tie(self):
        # swapping both rows gives the same cost; prefer (0,0) first
        cost = np.array([[1.0, 2.0], [2.0, 3.0]])
        # (0,0)+(1,1) = 4 and (0,1)+(1,0) = 4
        a = hungarian_assign(cost)
        assert a.pairs == ((0, 0), (1, 1))
        assert a.total_cost == 4.0

    def test_rectangular_tie_prefers_early_rows(self):
        # 3 rows, 2 cols, all zero: any 2 rows could be matched
        a = hungarian_assign(np.zeros((3, 2)))
        assert a.pairs == ((0, 0), (1, 1))

    def test_tie_break_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            # small integer costs force frequent ties
            values = rng.integers(0, 3, size=(4, 4)).astype(float)
            got = hungarian_assign(values)
            expected_pairs, expected_total = brute_force_assign(values)
            assert got.pairs == expected_pairs
            assert got.total_cost == pytest.approx(expected_total, abs=1e-12)


class TestAgainstBruteForce:
    @pytest.mark.parametrize("shape", [(2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (3, 5), (5, 3), (2, 6), (6, 2)])
    def test_random_matrices(self, shape):
        rng = np.random.default_rng(hash(shape) % (2**32))
        for _ in range(40):
            values = rng.random(shape) * 10 - 2
            got = hungarian_assign(values)
            expected_pairs, expected_total = brute_force_assign(values)
            assert got.total_cost == expected_total
            assert got.pairs == expected_pairs

    def test_rectangular_padding_preserves_submatching(self):
        # a dominant column must not be stolen by padding artifacts
        values = np.array([[100.0, 1.0], [100.0, 100.0], [1.0, 100.0]])
        got = hungarian_assign(values)
        assert got.pairs == ((0, 1), (2, 0))
        assert got.total_cost == 2.0
