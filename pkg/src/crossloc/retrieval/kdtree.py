"""Exact k-nearest-neighbor KD-tree.

Construction is numpy; the search loop runs in the compiled ``_kdcore``
extension when it is importable and in :func:`_search_python` otherwise.
Set ``CROSSLOC_PURE_PYTHON=1`` to force the fallback.

Ordering is by (squared distance, id, position) so results are
deterministic and identical to a sorted brute-force scan.
"""
from __future__ import annotations

import heapq
import os

import numpy as np

try:
    if os.environ.get("CROSSLOC_PURE_PYTHON"):
        raise ImportError("pure-python mode requested")
    from . import _kdcore
except ImportError:  # pragma: no cover - depends on the build
    _kdcore = None

BACKENDS = ("cython", "python") if _kdcore is not None else ("python",)
DEFAULT_BACKEND = BACKENDS[0]


class KDTree:
    """Median-split tree on the widest-spread dimension of each node.

    Leaves hold up to ``leaf_size`` points stored contiguously in
    ``self.data`` (points permuted into tree order).
    """

    def __init__(self, points, ids=None, leaf_size: int = 8):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError(f"KDTree needs a non-empty (n, k) array, got shape {pts.shape}")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        n = len(pts)
        ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if ids.shape != (n,):
            raise ValueError("ids must have one entry per point")
        self.n, self.dim = pts.shape
        self.leaf_size = leaf_size
        perm = np.arange(n)
        split_dim, split_val, left, right, start, end = [], [], [], [], [], []

        def new_node(s, e):
            split_dim.append(-1)
            split_val.append(0.0)
            left.append(-1)
            right.append(-1)
            start.append(s)
            end.append(e)
            return len(start) - 1

        root = new_node(0, n)
        stack = [root]
        while stack:
            node = stack.pop()
            s, e = start[node], end[node]
            if e - s <= leaf_size:
                continue
            sub = pts[perm[s:e]]
            spread = sub.max(axis=0) - sub.min(axis=0)
            d = int(np.argmax(spread))
            if spread[d] <= 0:
                continue  # all points identical
            order = np.argsort(sub[:, d], kind="stable")
            perm[s:e] = perm[s:e][order]
            mid = s + (e - s) // 2
            split_dim[node] = d
            split_val[node] = float(pts[perm[mid], d])
            lo, hi = new_node(s, mid), new_node(mid, e)
            left[node], right[node] = lo, hi
            stack += [hi, lo]

        self.perm = perm
        self.data = np.ascontiguousarray(pts[perm])
        self.ids = np.ascontiguousarray(ids[perm])
        self.split_dim = np.array(split_dim, dtype=np.int32)
        self.split_val = np.array(split_val, dtype=np.float64)
        self.left = np.array(left, dtype=np.int32)
        self.right = np.array(right, dtype=np.int32)
        self.start = np.array(start, dtype=np.int32)
        self.end = np.array(end, dtype=np.int32)
        for arr in (self.data, self.ids, self.perm, self.split_dim, self.split_val, self.left,
                    self.right, self.start, self.end):
            arr.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.start)

    def depth(self):
        best, stack = 0, [(0, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.left[node] >= 0:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best

    def query(self, q, k: int, backend: str | None = None):
        """Return ``(positions, distances, nodes_visited)`` of the k nearest points.

        ``positions`` index the original ``points`` array.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.ascontiguousarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query has shape {q.shape}, index dimension is {self.dim}")
        k = min(k, self.n)
        backend = backend or DEFAULT_BACKEND
        if backend == "cython":
            if _kdcore is None:
                raise RuntimeError("compiled kd-tree kernel is not available")
            slots, d2, visited = _kdcore.knn_search(
                self.data, self.ids, self.split_dim, self.split_val, self.left, self.right,
                self.start, self.end, q, k)
        elif backend == "python":
            slots, d2, visited = _search_python(self, q, k)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        return self.perm[slots], np.sqrt(d2), visited


def _search_python(tree: KDTree, q, k):
    heap = []  # max-heap of (-d2, -id, -slot)
    worst = np.inf
    visited = 0
    stack = [(0, 0.0)]
    data, ids = tree.data, tree.ids
    while stack:
        node, bound = stack.pop()
        if len(heap) == k and bound > worst:
            continue
        visited += 1
        d = tree.split_dim[node]
        if d < 0:
            s, e = tree.start[node], tree.end[node]
            diff = data[s:e] - q
            d2s = (diff * diff).sum(axis=1)
            for j in range(e - s):
                key = (-d2s[j], -ids[s + j], -(s + j))
                if len(heap) < k:
                    heapq.heappush(heap, key)
                elif key > heap[0]:
                    heapq.heapreplace(heap, key)
            if len(heap) == k:
                worst = -heap[0][0]
            continue
        delta = q[d] - tree.split_val[node]
        near, far = (tree.left[node], tree.right[node]) if delta <= 0 else \
            (tree.right[node], tree.left[node])
        stack.append((far, max(bound, delta * delta)))
        stack.append((near, bound))
    best = sorted((-a, -b, -c) for a, b, c in heap)
    slots = np.array([c for _, _, c in best], dtype=np.intp)
    d2 = np.array([a for a, _, _ in best], dtype=np.float64)
    return slots, d2, visited
