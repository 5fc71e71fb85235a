"""Minimum-cost matching of rows into columns over a sparse edge set.

Successive shortest augmenting paths with Dijkstra on reduced costs (the
Jonker-Volgenant scheme).  Only columns touched by a search are reset, so a
row costs time proportional to the part of the graph it explores.
"""
from __future__ import annotations

import numba as nb
import numpy as np

from .errors import ConfigurationError


@nb.njit(cache=True, inline="always")
def _heap_push(hd, hj, size, d, j):
    k = size
    hd[k] = d
    hj[k] = j
    while k > 0:
        p = (k - 1) >> 1
        if hd[p] <= hd[k]:
            break
        hd[p], hd[k] = hd[k], hd[p]
        hj[p], hj[k] = hj[k], hj[p]
        k = p
    return size + 1


@nb.njit(cache=True, inline="always")
def _heap_pop(hd, hj, size):
    d = hd[0]
    j = hj[0]
    size -= 1
    hd[0] = hd[size]
    hj[0] = hj[size]
    k = 0
    while True:
        l = 2 * k + 1
        if l >= size:
            break
        c = l
        if l + 1 < size and hd[l + 1] < hd[l]:
            c = l + 1
        if hd[k] <= hd[c]:
            break
        hd[c], hd[k] = hd[k], hd[c]
        hj[c], hj[k] = hj[k], hj[c]
        k = c
    return d, j, size


@nb.njit(cache=True, nogil=True)
def _assign(indptr, indices, costs, n_cols):
    n_rows = indptr.size - 1
    v = np.zeros(n_cols)
    row_match = -np.ones(n_rows, dtype=np.int64)
    col_match = -np.ones(n_cols, dtype=np.int64)
    row_cost = np.zeros(n_rows)
    dist = np.full(n_cols, np.inf)
    pred = np.empty(n_cols, dtype=np.int64)
    pred_cost = np.empty(n_cols)
    stamp = -np.ones(n_cols, dtype=np.int64)
    done = np.zeros(n_cols, dtype=np.bool_)
    scanned = np.empty(n_cols, dtype=np.int64)
    cap = indices.size + 1
    hd = np.empty(cap)
    hj = np.empty(cap, dtype=np.int64)
    failed = 0
    for f in range(n_rows):
        size = 0
        n_scanned = 0
        for e in range(indptr[f], indptr[f + 1]):
            j = indices[e]
            dj = costs[e] - v[j]
            if stamp[j] != f:
                stamp[j] = f
                dist[j] = np.inf
                done[j] = False
            if dj < dist[j]:
                dist[j] = dj
                pred[j] = f
                pred_cost[j] = costs[e]
                size = _heap_push(hd, hj, size, dj, j)
        free = -1
        big = 0.0
        while size > 0:
            dj, j, size = _heap_pop(hd, hj, size)
            if done[j] or dj > dist[j]:
                continue
            done[j] = True
            scanned[n_scanned] = j
            n_scanned += 1
            if col_match[j] < 0:
                free = j
                big = dj
                break
            i = col_match[j]
            ui = row_cost[i] - v[j]
            for e in range(indptr[i], indptr[i + 1]):
                k = indices[e]
                if stamp[k] != f:
                    stamp[k] = f
                    dist[k] = np.inf
                    done[k] = False
                if done[k]:
                    continue
                nd = dj + costs[e] - v[k] - ui
                if nd < dist[k]:
                    dist[k] = nd
                    pred[k] = i
                    pred_cost[k] = costs[e]
                    size = _heap_push(hd, hj, size, nd, k)
        if free < 0:
            failed += 1
            continue
        for t in range(n_scanned):
            j = scanned[t]
            if dist[j] < big:
                v[j] += dist[j] - big
        j = free
        while True:
            i = pred[j]
            prev = row_match[i]
            row_match[i] = j
            col_match[j] = i
            row_cost[i] = pred_cost[j]
            if i == f:
                break
            j = prev
    return row_match, failed


def sparse_assignment(indptr, indices, costs, n_cols: int):
    """Match every row to a distinct column minimizing total cost.

    Edges are given in CSR form.  Returns ``(row_to_col, unmatched_rows)``;
    ``row_to_col`` is -1 for rows that could not be matched.
    """
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    if indptr[-1] != indices.size or indices.size != costs.size:
        raise ConfigurationError("inconsistent CSR arrays")
    if indices.size and (indices.min() < 0 or indices.max() >= n_cols):
        raise ConfigurationError("column index out of range")
    row_match, failed = _assign(indptr, indices, costs, int(n_cols))
    return row_match, int(failed)
