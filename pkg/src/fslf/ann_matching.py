"""Randomized k-d forest for approximate nearest neighbours, and the
spatially constrained candidate selection built on top of it.

Each tree splits on a dimension drawn at random among the five with the
largest variance at that node, at the mean value. Queries run a best-first
search over all trees through one shared priority queue and stop after a
fixed number of leaf visits. Squared Euclidean distance throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConfigError, DegenerateDataError

LEAF_SIZE = 16
TOP_DIMS = 5
VAR_SAMPLE = 128
DEFAULT_TREES = 4
DEFAULT_CHECKS = 256
UNBOUNDED = -1


@dataclass(frozen=True)
class KdForest:
    """Flat-array storage for ``n_trees`` randomized k-d trees.

    Node arrays have shape ``(n_trees, max_nodes)``. ``left[t, i] == -1``
    marks a leaf whose points are ``perm[t, start:end]``.
    """

    data: np.ndarray
    split_dim: np.ndarray
    split_val: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    perm: np.ndarray
    max_checks: int = DEFAULT_CHECKS

    @property
    def n_trees(self) -> int:
        return self.perm.shape[0]

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def n_leaves(self, tree: int) -> int:
        used = self.end[tree] > 0
        return int(np.sum((self.left[tree] == -1) & used))


@numba.njit(cache=True, nogil=True)
def _build_tree(data, draws, leaf_size, var_sample, top_dims):
    n, dim = data.shape
    cap = 2 * n + 1
    perm = np.arange(n).astype(np.int32)
    dims = np.zeros(cap, np.int32)
    vals = np.zeros(cap, np.float64)
    lefts = np.full(cap, -1, np.int32)
    rights = np.full(cap, -1, np.int32)
    starts = np.zeros(cap, np.int32)
    ends = np.zeros(cap, np.int32)
    ends[0] = n
    n_nodes = 1
    stack = np.empty(cap, np.int32)
    stack[0] = 0
    top = 1
    mean = np.empty(dim)
    var = np.empty(dim)
    taken = np.empty(dim, np.bool_)
    best = np.empty(top_dims, np.int64)
    scratch = np.empty(n, np.int32)
    while top > 0:
        top -= 1
        node = stack[top]
        lo, hi = starts[node], ends[node]
        if hi - lo <= leaf_size:
            continue
        # spread and cut are estimated on a strided subsample of large nodes
        step = max(1, (hi - lo) // var_sample)
        mean[:] = 0.0
        var[:] = 0.0
        cnt = 0
        for i in range(lo, hi, step):
            row = data[perm[i]]
            for d in range(dim):
                mean[d] += row[d]
            cnt += 1
        mean /= cnt
        for i in range(lo, hi, step):
            row = data[perm[i]]
            for d in range(dim):
                diff = row[d] - mean[d]
                var[d] += diff * diff
        # the top_dims largest positive variances, ties toward the larger index
        taken[:] = False
        n_best = 0
        for _ in range(top_dims):
            pick = -1
            for d in range(dim):
                if not taken[d] and var[d] > 0 and (pick < 0 or var[d] >= var[pick]):
                    pick = d
            if pick < 0:
                break
            taken[pick] = True
            best[n_best] = pick
            n_best += 1
        if n_best == 0:
            continue  # all points identical: oversized leaf
        split = best[min(int(draws[node] * n_best), n_best - 1)]
        cut = mean[split]
        n_left = 0
        n_right = 0
        for i in range(lo, hi):
            p = perm[i]
            if data[p, split] < cut:
                perm[lo + n_left] = p
                n_left += 1
            else:
                scratch[n_right] = p
                n_right += 1
        for i in range(n_right):
            perm[lo + n_left + i] = scratch[i]
        if n_left == 0 or n_right == 0:
            continue
        dims[node] = split
        vals[node] = cut
        mid = lo + n_left
        lefts[node] = n_nodes
        rights[node] = n_nodes + 1
        starts[n_nodes], ends[n_nodes] = lo, mid
        starts[n_nodes + 1], ends[n_nodes + 1] = mid, hi
        n_nodes += 2
        stack[top] = rights[node]
        stack[top + 1] = lefts[node]
        top += 2
    return perm, dims[:n_nodes], vals[:n_nodes], lefts[:n_nodes], rights[:n_nodes], \
        starts[:n_nodes], ends[:n_nodes]


def build_forest(points, n_trees: int = DEFAULT_TREES, seed=0, max_checks: int = DEFAULT_CHECKS,
                 leaf_size: int = LEAF_SIZE) -> KdForest:
    data = np.ascontiguousarray(points, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise DegenerateDataError("cannot index an empty feature set")
    if n_trees < 1:
        raise ConfigError("need at least one tree")
    rng = np.random.default_rng(seed)
    built = []
    for _ in range(n_trees):
        perm, *nodes = _build_tree(data, rng.random(2 * data.shape[0] + 1), int(leaf_size),
                                   VAR_SAMPLE, TOP_DIMS)
        built.append((perm, nodes))
    width = max(len(nodes[0]) for _, nodes in built)
    arrays = [np.zeros((n_trees, width), dtype=dt) for dt in
              (np.int32, np.float64, np.int32, np.int32, np.int32, np.int32)]
    for a in (arrays[2], arrays[3]):
        a.fill(-1)
    perms = np.empty((n_trees, data.shape[0]), dtype=np.int32)
    for t, (perm, nodes) in enumerate(built):
        perms[t] = perm
        for a, col in zip(arrays, nodes):
            a[t, :len(col)] = col
    return KdForest(data, *arrays, perm=perms, max_checks=int(max_checks))


# --------------------------------------------------------------------------
# compiled search

@numba.njit(cache=True, nogil=True)
def _result_offer(rd, ri, size, k, d, idx):
    # rd/ri form a max-heap on distance, ties broken toward the larger index
    if size < k:
        i = size
        rd[i] = d
        ri[i] = idx
        size += 1
        while i > 0:
            p = (i - 1) >> 1
            if rd[p] > rd[i] or (rd[p] == rd[i] and ri[p] > ri[i]):
                break
            rd[p], rd[i] = rd[i], rd[p]
            ri[p], ri[i] = ri[i], ri[p]
            i = p
        return size
    if d > rd[0] or (d == rd[0] and idx > ri[0]):
        return size
    rd[0] = d
    ri[0] = idx
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        m = i
        if l < size and (rd[l] > rd[m] or (rd[l] == rd[m] and ri[l] > ri[m])):
            m = l
        if r < size and (rd[r] > rd[m] or (rd[r] == rd[m] and ri[r] > ri[m])):
            m = r
        if m == i:
            break
        rd[m], rd[i] = rd[i], rd[m]
        ri[m], ri[i] = ri[i], ri[m]
        i = m
    return size


@numba.njit(cache=True, nogil=True)
def _search_one(data, split_dim, split_val, left, right, start, end, perm,
                q, k, max_checks, seen, out_i, out_d):
    n_trees = perm.shape[0]
    dim = data.shape[1]
    # each node's far branch is queued at most once per query
    cap = (left.shape[1] + 1) * n_trees
    hkeys = np.empty(cap, dtype=np.float64)
    hvals = np.empty((cap, 3), dtype=np.int64)
    hsize = 0
    rd = np.empty(k, dtype=np.float64)
    ri = np.empty(k, dtype=np.int64)
    rsize = 0
    touched = np.empty(data.shape[0], dtype=np.int64)
    n_touched = 0
    # seed the queue with every root; the key orders, hvals[:, 2] keeps the bound
    for t in range(n_trees):
        hkeys[hsize] = 0.0
        hvals[hsize, 0] = t
        hvals[hsize, 1] = 0
        hvals[hsize, 2] = 0
        hsize += 1
    bounds = np.zeros(cap, dtype=np.float64)
    n_bounds = 1  # bounds[0] = 0 shared by the roots
    checks = 0
    while hsize > 0:
        if max_checks >= 0 and checks >= max_checks:
            break
        # pop: tree, node, slot of the pruning bound
        key = hkeys[0]
        t = hvals[0, 0]
        node = hvals[0, 1]
        bound = bounds[hvals[0, 2]]
        hsize -= 1
        hkeys[0] = hkeys[hsize]
        for c in range(3):
            hvals[0, c] = hvals[hsize, c]
        i = 0
        while True:
            l = 2 * i + 1
            r = l + 1
            m = i
            if l < hsize and hkeys[l] < hkeys[m]:
                m = l
            if r < hsize and hkeys[r] < hkeys[m]:
                m = r
            if m == i:
                break
            hkeys[m], hkeys[i] = hkeys[i], hkeys[m]
            for c in range(3):
                hvals[m, c], hvals[i, c] = hvals[i, c], hvals[m, c]
            i = m
        if rsize == k and bound > rd[0]:
            continue
        # descend to a leaf, queueing the far side of every split
        while left[t, node] >= 0:
            d = split_dim[t, node]
            diff = q[d] - split_val[t, node]
            if diff < 0:
                near = left[t, node]
                far = right[t, node]
            else:
                near = right[t, node]
                far = left[t, node]
            far_bound = max(bound, diff * diff)
            if not (rsize == k and far_bound > rd[0]):
                bounds[n_bounds] = far_bound
                hkeys[hsize] = key + diff * diff
                hvals[hsize, 0] = t
                hvals[hsize, 1] = far
                hvals[hsize, 2] = n_bounds
                n_bounds += 1
                j = hsize
                hsize += 1
                while j > 0:
                    p = (j - 1) >> 1
                    if hkeys[p] <= hkeys[j]:
                        break
                    hkeys[p], hkeys[j] = hkeys[j], hkeys[p]
                    for c in range(3):
                        hvals[p, c], hvals[j, c] = hvals[j, c], hvals[p, c]
                    j = p
            node = near
        checks += 1
        for s in range(start[t, node], end[t, node]):
            idx = perm[t, s]
            if seen[idx]:
                continue
            seen[idx] = 1
            touched[n_touched] = idx
            n_touched += 1
            acc = 0.0
            for c in range(dim):
                e = data[idx, c] - q[c]
                acc += e * e
            rsize = _result_offer(rd, ri, rsize, k, acc, idx)
    for s in range(n_touched):
        seen[touched[s]] = 0
    # heap -> ascending (distance, index)
    order = np.argsort(ri[:rsize], kind="mergesort")
    ds = rd[:rsize][order]
    iis = ri[:rsize][order]
    order2 = np.argsort(ds, kind="mergesort")
    for s in range(rsize):
        out_d[s] = ds[order2[s]]
        out_i[s] = iis[order2[s]]
    return rsize


@numba.njit(cache=True, nogil=True)
def _search_many(data, split_dim, split_val, left, right, start, end, perm,
                 queries, k, max_checks, out_i, out_d, counts):
    seen = np.zeros(data.shape[0], dtype=np.uint8)
    for qi in range(queries.shape[0]):
        counts[qi] = _search_one(data, split_dim, split_val, left, right, start, end, perm,
                                 queries[qi], k, max_checks, seen, out_i[qi], out_d[qi])


def knn_search_batch(forest: KdForest, queries, k: int, max_checks: int | None = None):
    """Approximate k nearest neighbours for each row of ``queries``.

    Returns ``(indices, sq_distances, counts)``. Rows are sorted by distance;
    entries past ``counts[i]`` are padding (-1 / inf). ``max_checks=None``
    uses the forest's budget; a negative value means unbounded.
    """
    if k < 1:
        raise ConfigError("k must be at least 1")
    q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    if q.shape[1] != forest.data.shape[1]:
        raise ConfigError(f"query dimension {q.shape[1]} != index dimension {forest.data.shape[1]}")
    k = min(int(k), forest.size)
    checks = forest.max_checks if max_checks is None else int(max_checks)
    out_i = np.full((q.shape[0], k), -1, dtype=np.int64)
    out_d = np.full((q.shape[0], k), np.inf)
    counts = np.zeros(q.shape[0], dtype=np.int64)
    _search_many(forest.data, forest.split_dim, forest.split_val, forest.left, forest.right,
                 forest.start, forest.end, forest.perm, q, k, checks, out_i, out_d, counts)
    return out_i, out_d, counts


def knn_search(forest: KdForest, query, k: int, max_checks: int | None = None):
    """``(indices, sq_distances)`` of up to ``k`` approximate neighbours of one query."""
    idx, dist, counts = knn_search_batch(forest, np.asarray(query)[None], k, max_checks)
    n = counts[0]
    return idx[0, :n], dist[0, :n]


def brute_force_knn(points, query, k: int):
    """Exact neighbours by full scan, ties broken by index."""
    d = ((np.asarray(points, dtype=np.float64) - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(d.size), d))[:k]
    return order, d[order]


# --------------------------------------------------------------------------
# spatially constrained candidate selection

@dataclass(frozen=True)
class CandidateSet:
    """Bank entries retained for one target voxel."""

    query: tuple[int, int, int]
    entries: np.ndarray  # bank indices, first-seen order
    labels: np.ndarray
    origins: np.ndarray  # (n, 4): image id, x, y, z

    def __len__(self) -> int:
        return int(self.entries.size)


def within_window(origins_xyz, target, window) -> np.ndarray:
    half = (np.broadcast_to(np.asarray(window), (3,)) - 1) // 2
    return np.all(np.abs(np.asarray(origins_xyz) - np.asarray(target)) <= half, axis=-1)


def select_candidates_batch(targets, target_segments, forests, bank_labels, bank_origins,
                            k_per_feature: int = 32, window=9, max_checks: int | None = None):
    """Candidate sets for many target voxels.

    ``target_segments`` and ``forests`` hold one entry per feature segment.
    Each segment is searched on its own; neighbours whose atlas origin falls
    outside the window centered at the target voxel are dropped and the
    survivors of all segments are merged without duplicates.
    """
    window = np.broadcast_to(np.asarray(window, dtype=np.int64), (3,))
    if np.any(window < 1) or np.any(window % 2 == 0):
        raise ConfigError(f"window must be odd per axis, got {window.tolist()}")
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    per_segment = []
    for feats, forest in zip(target_segments, forests):
        idx, _, counts = knn_search_batch(forest, feats, k_per_feature, max_checks)
        per_segment.append((idx, counts))
    bank_origins = np.asarray(bank_origins)
    bank_labels = np.asarray(bank_labels)
    out = []
    for row, target in enumerate(targets):
        chosen = []
        for idx, counts in per_segment:
            hits = idx[row, :counts[row]]
            keep = within_window(bank_origins[hits, 1:], target, window)
            chosen.append(hits[keep])
        merged = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
        _, first = np.unique(merged, return_index=True)
        entries = merged[np.sort(first)]
        out.append(CandidateSet(tuple(int(v) for v in target), entries,
                                bank_labels[entries], bank_origins[entries]))
    return out


def select_candidates(target, target_segments, forests, bank_labels, bank_origins,
                      k_per_feature: int = 32, window=9, max_checks: int | None = None) -> CandidateSet:
    segs = [np.asarray(s)[None] for s in target_segments]
    return select_candidates_batch([target], segs, forests, bank_labels, bank_origins,
                                   k_per_feature, window, max_checks)[0]
