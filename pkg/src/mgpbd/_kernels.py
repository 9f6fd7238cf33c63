"""Serial loops that do not vectorize: Gauss-Seidel and greedy aggregation."""
import numpy as np
from numba import njit


@njit(cache=True)
def gauss_seidel(indptr, indices, data, x, b, sweeps, backward=False):
    """Gauss-Seidel sweeps on A x = b, in place; natural order unless backward."""
    n = len(indptr) - 1
    for _ in range(sweeps):
        for k in range(n):
            i = n - 1 - k if backward else k
            acc = b[i]
            diag = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j == i:
                    diag = data[p]
                else:
                    acc -= data[p] * x[j]
            if diag != 0.0:
                x[i] = acc / diag
    return x


@njit(cache=True)
def standard_aggregation(indptr, indices, data):
    n = len(indptr) - 1
    agg = np.full(n, -1, dtype=np.int64)
    n_agg = 0
    for i in range(n):
        if agg[i] >= 0:
            continue
        has_nb = False
        nb_taken = False
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if j == i:
                continue
            has_nb = True
            if agg[j] >= 0:
                nb_taken = True
                break
        if nb_taken:
            continue
        agg[i] = n_agg
        if has_nb:
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j != i:
                    agg[j] = n_agg
        n_agg += 1

    # leftovers join the pass-1 aggregate they are most strongly tied to
    first = agg.copy()
    for i in range(n):
        if first[i] >= 0:
            continue
        best = -1
        best_w = -1.0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            a = first[j]
            if j == i or a < 0:
                continue
            w = abs(data[p])
            if w > best_w or (w == best_w and a < best):
                best = a
                best_w = w
        agg[i] = best
    return agg, n_agg
