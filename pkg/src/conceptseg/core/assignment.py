"""Minimum-cost bipartite assignment with deterministic tie-breaking.

The solver is a shortest-augmenting-path method (Jonker-Volgenant style)
that also yields dual potentials. Rectangular inputs are padded to square
with a large constant, which leaves the optimal sub-matching unchanged.
Among equal-cost optima the returned matching minimizes the lexicographic
sequence of (row, col) pairs; the refinement step prunes candidate cells
by reduced cost, so matrices without ties pay for a single solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class InvalidCostError(ValueError):
    """Cost matrix contains non-finite entries."""


@dataclass(frozen=True)
class CostMatrix:
    """A rows x cols matrix of finite real matching costs."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidCostError(f"cost matrix must be 2-D, got shape {values.shape}")
        if values.size and not np.isfinite(values).all():
            raise InvalidCostError("cost matrix contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class Assignment:
    """One-to-one matching: pairs sorted by row, plus their summed cost."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def __post_init__(self) -> None:
        rows = [r for r, _ in self.pairs]
        cols = [c for _, c in self.pairs]
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ValueError("assignment pairs must have distinct rows and distinct columns")

    def col_of(self, row: int) -> int | None:
        for r, c in self.pairs:
            if r == row:
                return c
        return None


def _solve_thin(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve an n x m (n <= m) min-cost assignment matching every row.

    Returns (col_of_row, u, v) where u, v are dual potentials satisfying
    a[i, j] - u[i] - v[j] >= 0 with equality on matched cells. Equivalent
    to padding with a large constant and solving square: the constant would
    attach only to dummy rows, leaving the real sub-matching unchanged.
    """
    n, m = a.shape
    u = np.zeros(n, dtype=np.float64)
    v = np.zeros(m + 1, dtype=np.float64)  # index m is the virtual column
    row_of_col = np.full(m + 1, -1, dtype=np.int64)
    way = np.full(m + 1, m, dtype=np.int64)
    for i in range(n):
        row_of_col[m] = i
        j0 = m
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = np.flatnonzero(~used[:m])
            cur = a[i0, free] - u[i0] - v[free]
            better = cur < minv[free]
            upd = free[better]
            minv[upd] = cur[better]
            way[upd] = j0
            k = int(np.argmin(minv[free]))
            j1 = int(free[k])
            delta = minv[j1]
            used_cols = np.flatnonzero(used)
            u[row_of_col[used_cols]] += delta
            v[used_cols] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of_col[j0] < 0:
                break
        while j0 != m:
            j1 = int(way[j0])
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(m):
        if row_of_col[j] >= 0:
            col_of_row[row_of_col[j]] = j
    return col_of_row, u, v[:m]


def _solve_rect(values: np.ndarray) -> tuple[dict[int, int], float]:
    """Optimal matching of size min(rows, cols) and its fsum cost."""
    rows, cols = values.shape
    if rows == 0 or cols == 0:
        return {}, 0.0
    if rows <= cols:
        col_of_row, _, _ = _solve_thin(values)
        matching = {r: int(col_of_row[r]) for r in range(rows)}
    else:
        row_of_col, _, _ = _solve_thin(values.T)
        matching = {int(row_of_col[c]): c for c in range(cols)}
    total = math.fsum(values[r, c] for r, c in sorted(matching.items()))
    return matching, total


def _refine_lexicographic(
    values: np.ndarray,
    matching: dict[int, int],
    total: float,
    u: np.ndarray,
    v: np.ndarray,
) -> list[tuple[int, int]]:
    """Rewrite an optimal matching into the lexicographically minimal one.

    Cells with strictly positive reduced cost under the solved duals cannot
    belong to any optimum and are skipped without a solve; remaining
    candidates are confirmed by solving the reduced subproblem exactly.
    """
    rows, cols = values.shape
    k = min(rows, cols)
    scale = max(1.0, float(np.abs(values).max())) if values.size else 1.0
    tol = 1e-9 * scale

    pairs: list[tuple[int, int]] = []
    rem_rows = list(range(rows))
    rem_cols = list(range(cols))
    current = dict(matching)
    t_rem = total

    def sub_solve(skip_row: int, take_col: int) -> tuple[dict[int, int], float]:
        sub_rows = [x for x in rem_rows if x > skip_row]
        sub_cols = [x for x in rem_cols if x != take_col]
        sub = values[np.ix_(sub_rows, sub_cols)]
        sub_match, sub_total = _solve_rect(sub)
        mapped = {sub_rows[i]: sub_cols[j] for i, j in sub_match.items()}
        return mapped, sub_total

    while len(pairs) < k:
        fixed = False
        for r in list(rem_rows):
            c_star = current.get(r)
            need = k - len(pairs)
            if len([x for x in rem_rows if x >= r]) < need:
                break
            candidates = [c for c in rem_cols if c_star is None or c < c_star]
            for c in candidates:
                if values[r, c] - u[r] - v[c] > tol:
                    continue
                completion, sub_total = sub_solve(r, c)
                if values[r, c] + sub_total <= t_rem + tol:
                    pairs.append((r, c))
                    rem_rows = [x for x in rem_rows if x > r]
                    rem_cols.remove(c)
                    current = completion
                    t_rem = sub_total
                    fixed = True
                    break
            if fixed:
                break
            if c_star is not None:
                # every smaller column was ruled out; the current optimum's
                # own column is the lexicographic choice for this row
                pairs.append((r, c_star))
                rem_rows = [x for x in rem_rows if x > r]
                rem_cols.remove(c_star)
                current.pop(r)
                t_rem = t_rem - values[r, c_star]
                fixed = True
                break
        if not fixed:
            raise AssertionError("refinement failed to extend the matching")
    return pairs


def hungarian_assign(cost: CostMatrix | np.ndarray) -> Assignment:
    """Globally minimal one-to-one matching of size min(rows, cols).

    Among equal-cost optima, returns the matching whose row-sorted pair
    sequence is lexicographically smallest.
    """
    if not isinstance(cost, CostMatrix):
        cost = CostMatrix(np.asarray(cost, dtype=np.float64))
    values = cost.values
    rows, cols = values.shape
    if rows == 0 or cols == 0:
        return Assignment(pairs=(), total_cost=0.0)

    if rows <= cols:
        col_of_row, u, v = _solve_thin(values)
        matching = {r: int(col_of_row[r]) for r in range(rows)}
    else:
        row_of_col, v, u = _solve_thin(values.T)
        matching = {int(row_of_col[c]): c for c in range(cols)}
    total = math.fsum(values[r, c] for r, c in sorted(matching.items()))

    pairs = _refine_lexicographic(values, matching, total, u, v)
    pairs.sort()
    final_total = math.fsum(values[r, c] for r, c in pairs)
    return Assignment(pairs=tuple(pairs), total_cost=final_total)
