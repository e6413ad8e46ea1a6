"""Minimum-cost one-to-one assignment (shortest augmenting paths with potentials)."""
from __future__ import annotations

import math

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError


@dataclass(frozen=True)
class MatchResult:
    """Matched ``(query, gt)`` pairs sorted by query index, plus the unmatched queries."""

    pairs: tuple
    unmatched: tuple

    @property
    def query_index(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gt_index(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def total(self, cost) -> float:
        cost = np.asarray(cost)
        return math.fsum(cost[q, g] for q, g in self.pairs)


def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Assign every row of an ``n x m`` (n <= m) matrix to a distinct column.

    Rows are inserted one at a time; each insertion runs a Dijkstra-style
    search over reduced costs and augments along the shortest path.
    Returns ``col_of_row``.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of = np.zeros(m + 1, dtype=np.int64)  # 1-based row matched to column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    padded = np.zeros((n + 1, m + 1))
    padded[1:, 1:] = cost
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            cur = padded[i0, 1:] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[row_of[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if row_of[j]:
            col_of_row[row_of[j] - 1] = j - 1
    return col_of_row


def hungarian_match(cost) -> MatchResult:
    """Minimum-total-cost matching of queries (rows) to ground truths (columns).

    The pair count is ``min(#queries, #gt)``; remaining queries are returned
    as unmatched.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix must be finite")
    nq, ng = cost.shape
    if nq == 0 or ng == 0:
        return MatchResult((), tuple(range(nq)))
    if ng <= nq:
        col = _assign_rows(cost.T)            # gt -> query
        pairs = sorted((int(q), g) for g, q in enumerate(col))
    else:
        col = _assign_rows(cost)              # query -> gt
        pairs = [(q, int(g)) for q, g in enumerate(col)]
    matched = {q for q, _ in pairs}
    return MatchResult(tuple(pairs), tuple(q for q in range(nq) if q not in matched))
