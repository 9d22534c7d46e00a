"""Minimum-cost one-to-one assignment (rectangular Kuhn-Munkres).

Shortest-augmenting-path formulation with row/column potentials, O(n^2 m).
Ties in the path search resolve toward the lowest query index, so the
assignment is deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Assign a distinct query (row) to every target (column) at minimum
    total cost.  `cost` is (n_queries, n_targets) with n_targets <= n_queries;
    returns (query, target) pairs sorted by target index."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    n_q, n_t = cost.shape
    if n_t == 0:
        return []
    if n_t > n_q:
        raise ContractError(f"more targets than queries: {n_t} > {n_q}")
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix contains non-finite entries")

    inf = math.inf
    a = cost.T  # rows = targets to place, columns = queries
    u = [0.0] * (n_t + 1)
    v = [0.0] * (n_q + 1)
    match = [0] * (n_q + 1)  # match[j] = 1-based target occupying query j
    way = [0] * (n_q + 1)

    for i in range(1, n_t + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n_q + 1)
        used = [False] * (n_q + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            row = a[i0 - 1]
            for j in range(1, n_q + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n_q + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    pairs = [(j - 1, match[j] - 1) for j in range(1, n_q + 1) if match[j]]
    pairs.sort(key=lambda p: p[1])
    return pairs
