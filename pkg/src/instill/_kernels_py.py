"""Pure-Python reference implementations of the clustering hot loops.

Semantics here are the contract: the compiled versions in ``_ckernels``
must walk the same order and produce bit-identical results. Keep the
floating-point expressions in the same evaluation order in both files.
"""

from __future__ import annotations

import numpy as np


def greedy_assign(order: np.ndarray, capacities: np.ndarray, n_points: int, n_clusters: int) -> np.ndarray:
    """Assign each point to the best-ranked cluster with remaining capacity.

    ``order`` is the flattened (point * n_clusters + cluster) pair index
    array, pre-sorted by descending similarity. Since capacities sum to
    n_points and every pair appears once, the walk always completes.
    """
    assignment = np.full(n_points, -1, dtype=np.int64)
    remaining = capacities.astype(np.int64).copy()
    assigned = 0
    for pair in order:
        point = pair // n_clusters
        cluster = pair - point * n_clusters
        if assignment[point] >= 0 or remaining[cluster] == 0:
            continue
        assignment[point] = cluster
        remaining[cluster] -= 1
        assigned += 1
        if assigned == n_points:
            break
    return assignment


def swap_refine_round(
    sim: np.ndarray,
    assignment: np.ndarray,
    cand_i: np.ndarray,
    cand_j: np.ndarray,
    min_gain: float,
) -> tuple[int, float]:
    """One round of capacity-preserving swaps over the candidate pairs.

    A pair is applied when exchanging the two points' clusters strictly
    increases the summed point-to-center similarity. Each point moves at
    most once per round so later gains stay valid against the snapshot
    ``sim`` matrix. Mutates ``assignment`` in place; returns
    (accepted_count, total_gain).
    """
    swapped = np.zeros(assignment.shape[0], dtype=np.uint8)
    accepted = 0
    total_gain = 0.0
    for idx in range(cand_i.shape[0]):
        i = cand_i[idx]
        j = cand_j[idx]
        if swapped[i] or swapped[j]:
            continue
        a = assignment[i]
        b = assignment[j]
        if a == b:
            continue
        gain = sim[i, b] + sim[j, a] - sim[i, a] - sim[j, b]
        if gain > min_gain:
            assignment[i] = b
            assignment[j] = a
            swapped[i] = 1
            swapped[j] = 1
            accepted += 1
            total_gain += gain
    return accepted, float(total_gain)
