# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled branch-and-bound search over a KDTree's flat node arrays.

Mirrors ``kdtree._search_python`` exactly: same traversal order, same
pruning rule (skip only when the bound is strictly worse than the current
k-th distance) and the same (distance, id, slot) ordering.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline bint _worse(double da, long long ia, Py_ssize_t sa,
                        double db, long long ib, Py_ssize_t sb) nogil:
    # True when entry a ranks after entry b
    if da != db:
        return da > db
    if ia != ib:
        return ia > ib
    return sa > sb


cdef void _sift_down(double* hd, long long* hi, Py_ssize_t* hs, Py_ssize_t n,
                     Py_ssize_t i) nogil:
    # max-heap on (d2, id, slot)
    cdef Py_ssize_t l, r, top
    cdef double td
    cdef long long ti
    cdef Py_ssize_t ts
    while True:
        l = 2 * i + 1
        r = l + 1
        top = i
        if l < n and _worse(hd[l], hi[l], hs[l], hd[top], hi[top], hs[top]):
            top = l
        if r < n and _worse(hd[r], hi[r], hs[r], hd[top], hi[top], hs[top]):
            top = r
        if top == i:
            return
        td = hd[i]; ti = hi[i]; ts = hs[i]
        hd[i] = hd[top]; hi[i] = hi[top]; hs[i] = hs[top]
        hd[top] = td; hi[top] = ti; hs[top] = ts
        i = top


cdef void _sift_up(double* hd, long long* hi, Py_ssize_t* hs, Py_ssize_t i) nogil:
    cdef Py_ssize_t p
    cdef double td
    cdef long long ti
    cdef Py_ssize_t ts
    while i > 0:
        p = (i - 1) // 2
        if not _worse(hd[i], hi[i], hs[i], hd[p], hi[p], hs[p]):
            return
        td = hd[i]; ti = hi[i]; ts = hs[i]
        hd[i] = hd[p]; hi[i] = hi[p]; hs[i] = hs[p]
        hd[p] = td; hi[p] = ti; hs[p] = ts
        i = p


def knn_search(const double[:, ::1] data, const long long[::1] ids,
               const int[::1] split_dim, const double[::1] split_val,
               const int[::1] left, const int[::1] right,
               const int[::1] start, const int[::1] end,
               const double[::1] q, int k):
    """Return (slots, squared distances, nodes visited), sorted best first."""
    cdef Py_ssize_t n_nodes = split_dim.shape[0]
    cdef Py_ssize_t dim = data.shape[1]
    cdef Py_ssize_t cap = 2 * n_nodes + 2
    stack_node_arr = np.empty(cap, dtype=np.intp)
    stack_bound_arr = np.empty(cap, dtype=np.float64)
    heap_d_arr = np.empty(k, dtype=np.float64)
    heap_i_arr = np.empty(k, dtype=np.int64)
    heap_s_arr = np.empty(k, dtype=np.intp)
    cdef Py_ssize_t[::1] stack_node = stack_node_arr
    cdef double[::1] stack_bound = stack_bound_arr
    cdef double[::1] heap_d = heap_d_arr
    cdef long long[::1] heap_i = heap_i_arr
    cdef Py_ssize_t[::1] heap_s = heap_s_arr
    cdef Py_ssize_t top = 0, size = 0, node, s, j, c
    cdef long visited = 0
    cdef int d
    cdef double bound, worst = np.inf, acc, diff, delta, fb
    with nogil:
        stack_node[0] = 0
        stack_bound[0] = 0.0
        top = 1
        while top > 0:
            top -= 1
            node = stack_node[top]
            bound = stack_bound[top]
            if size == k and bound > worst:
                continue
            visited += 1
            d = split_dim[node]
            if d < 0:
                for s in range(start[node], end[node]):
                    acc = 0.0
                    for c in range(dim):
                        diff = data[s, c] - q[c]
                        acc = acc + diff * diff
                    if size < k:
                        heap_d[size] = acc; heap_i[size] = ids[s]; heap_s[size] = s
                        _sift_up(&heap_d[0], &heap_i[0], &heap_s[0], size)
                        size += 1
                    elif _worse(heap_d[0], heap_i[0], heap_s[0], acc, ids[s], s):
                        heap_d[0] = acc; heap_i[0] = ids[s]; heap_s[0] = s
                        _sift_down(&heap_d[0], &heap_i[0], &heap_s[0], size, 0)
                if size == k:
                    worst = heap_d[0]
                continue
            delta = q[d] - split_val[node]
            fb = delta * delta
            if fb < bound:
                fb = bound
            if delta <= 0:
                stack_node[top] = right[node]; stack_bound[top] = fb; top += 1
                stack_node[top] = left[node]; stack_bound[top] = bound; top += 1
            else:
                stack_node[top] = left[node]; stack_bound[top] = fb; top += 1
                stack_node[top] = right[node]; stack_bound[top] = bound; top += 1
    order = np.lexsort((heap_s_arr[:size], heap_i_arr[:size], heap_d_arr[:size]))
    return heap_s_arr[:size][order], heap_d_arr[:size][order], int(visited)
