# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled clustering hot loops; contract defined by ``_kernels_py``.

Both implementations must walk candidates in the same order and evaluate
the gain expression identically so results are bit-equal across backends.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def greedy_assign(cnp.int64_t[::1] order, cnp.int64_t[::1] capacities, Py_ssize_t n_points, Py_ssize_t n_clusters):
    assignment_arr = np.full(n_points, -1, dtype=np.int64)
    remaining_arr = np.ascontiguousarray(capacities, dtype=np.int64).copy()
    cdef cnp.int64_t[::1] assignment = assignment_arr
    cdef cnp.int64_t[::1] remaining = remaining_arr
    cdef Py_ssize_t idx, point, cluster, assigned = 0
    cdef cnp.int64_t pair
    with nogil:
        for idx in range(order.shape[0]):
            pair = order[idx]
            point = pair // n_clusters
            cluster = pair - point * n_clusters
            if assignment[point] >= 0 or remaining[cluster] == 0:
                continue
            assignment[point] = cluster
            remaining[cluster] -= 1
            assigned += 1
            if assigned == n_points:
                break
    return assignment_arr


def swap_refine_round(
    cnp.float64_t[:, ::1] sim,
    cnp.int64_t[::1] assignment,
    cnp.int64_t[::1] cand_i,
    cnp.int64_t[::1] cand_j,
    double min_gain,
):
    swapped_arr = np.zeros(assignment.shape[0], dtype=np.uint8)
    cdef cnp.uint8_t[::1] swapped = swapped_arr
    cdef Py_ssize_t idx, i, j
    cdef cnp.int64_t a, b
    cdef double gain, total_gain = 0.0
    cdef long accepted = 0
    with nogil:
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
    return accepted, total_gain
