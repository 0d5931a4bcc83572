"""Numba CPU kernels for the sparse operations.

Both SDDMM variants accumulate each output value over the batch axis in
ascending order, so their results (and a same-ordered dense reference)
agree bit-for-bit. The structured variant is additionally parallel over
nonempty rows; every row writes a disjoint slice of the output, so the
result is independent of the thread count.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True)
def sddmm_full_grid(row_offsets, col_indices, x, g, out):
    # Baseline: walk every output slot of the m x n grid in natural order,
    # the CPU analog of launching one thread per output and letting the
    # no-work ones terminate. Multiply-adds happen only at stored entries.
    m = row_offsets.shape[0] - 1
    n = g.shape[1]
    b = x.shape[0]
    madds = np.int64(0)
    for i in range(m):
        p = row_offsets[i]
        end = row_offsets[i + 1]
        for j in range(n):
            if p < end and col_indices[p] == j:
                acc = out[p]
                for t in range(b):
                    acc += x[t, i] * g[t, j]
                out[p] = acc
                p += 1
        madds += (end - row_offsets[i]) * b
    return madds


@njit(cache=True, parallel=True)
def sddmm_row_ordered(row_order, n_nonempty, row_offsets, col_indices, x, g, out):
    # Structure-aware: touch only the nonempty prefix of row_order, and per
    # row only the columns actually present.
    b = x.shape[0]
    madds = np.int64(0)
    for q in prange(n_nonempty):
        i = row_order[q]
        for p in range(row_offsets[i], row_offsets[i + 1]):
            j = col_indices[p]
            acc = out[p]
            for t in range(b):
                acc += x[t, i] * g[t, j]
            out[p] = acc
        madds += (row_offsets[i + 1] - row_offsets[i]) * b
    return madds


@njit(cache=True)
def csr_add_into(row_offsets, col_indices, values, dense):
    m = row_offsets.shape[0] - 1
    for i in range(m):
        for p in range(row_offsets[i], row_offsets[i + 1]):
            dense[i, col_indices[p]] += values[p]


@njit(cache=True)
def csr_gather(row_offsets, col_indices, dense, out):
    m = row_offsets.shape[0] - 1
    for i in range(m):
        for p in range(row_offsets[i], row_offsets[i + 1]):
            out[p] = dense[i, col_indices[p]]
