"""
Reconstructing a feature from candidates
========================================

The label prior rebuilds a target feature from atlas candidates and learns
how much each of the three feature segments should count.
"""
import numpy as np

from fslf import fslp

rng = np.random.default_rng(0)
L = fslp.SEGMENT_LENGTHS
m = 12
A = rng.normal(size=(sum(L), m))
labels = np.array([1] * 6 + [0] * 6)

# the target is mostly foreground candidates, with a noisy first segment
y = A[:, :6] @ rng.random(6)
y[:L[0]] += rng.normal(0, 2.0, L[0])

sol = fslp.alternate(fslp.FslpProblem(y, A, labels))
print("alternations:", sol.n_iters)
print("objective trace:", np.round(sol.objective_trace, 4))
print("segment weights (intensity, gradient, signature):", np.round(sol.alpha, 3))
print("foreground error %.4f, background error %.4f" % (sol.e_F, sol.e_B))

# the joint problem is not convex, a small 2x2 probe shows it
probe = fslp.nonconvexity_probe(1.0, 1.0, 1.0)
print("Hessian eigenvalues at (1, 1, 1):", np.round(sorted(probe.eigenvalues), 4))
