"""
Approximate nearest neighbours
==============================

Build a randomized k-d forest and compare its answers with a full scan as
the search budget grows.
"""
import time

import numpy as np

from fslf.ann_matching import brute_force_knn, build_forest, knn_search_batch

rng = np.random.default_rng(1)
pts = rng.random((10_000, 125))
queries = rng.random((100, 125))

t0 = time.perf_counter()
forest = build_forest(pts, n_trees=4, seed=0)
print("built 4 trees in %.2fs" % (time.perf_counter() - t0))

exact = [set(brute_force_knn(pts, q, 32)[0]) for q in queries]
for checks in (64, 256, 1024, 4096, -1):
    t0 = time.perf_counter()
    idx = knn_search_batch(forest, queries, 32, max_checks=checks)[0]
    dt = time.perf_counter() - t0
    recall = np.mean([len(set(a) & e) / 32 for a, e in zip(idx, exact)])
    print("checks %6s  recall@32 %.3f  %.1f ms/query" % (checks if checks > 0 else "all", recall,
                                                         1000 * dt / len(queries)))

# uniform points in 125 dimensions are the hard case; clustered data is easier
centers = rng.random((20, 125))
clustered = centers[rng.integers(0, 20, 10_000)] + rng.normal(0, 0.02, (10_000, 125))
forest = build_forest(clustered, seed=0)
q = clustered[:100] + rng.normal(0, 0.01, (100, 125))
idx = knn_search_batch(forest, q, 32)[0]
recall = np.mean([len(set(a) & set(brute_force_knn(clustered, p, 32)[0])) / 32 for a, p in zip(idx, q)])
print("clustered data at the default budget: recall@32 %.3f" % recall)
