"""Seeded random-walker fusion on the target lattice.

Voxels are split by their signed distance to the current boundary into
foreground seeds, background seeds and candidates. Candidates are linked to
their 6-neighbours by Gaussian intensity weights and to two virtual
terminals by weights derived from the reconstruction errors. With squared
weights the energy is quadratic, and its minimiser solves a sparse
symmetric positive-definite system.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from .errors import ConfigError, DegenerateDataError, NumericError, ShapeError
from .volume import Volume, as_array

D_T = 2.0
EPSILON = 1.0
DELTA = 5.0
CG_THRESHOLD = 100_000
CG_TOL = 1e-8

_NEIGHBOURS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


@dataclass(frozen=True)
class NodeSelection:
    fg_seeds: np.ndarray  # boolean masks, same shape as the SDM
    bg_seeds: np.ndarray
    candidates: np.ndarray
    d_T: float
    eps: float

    @property
    def candidate_voxels(self) -> np.ndarray:
        return np.argwhere(self.candidates)


def select_nodes(sdm, d_T: float = D_T, eps: float = EPSILON, *, require_seeds: bool = True) -> NodeSelection:
    """Band classification of an SDM.

    Foreground seeds: ``-(d_T+eps) <= d <= -d_T``; background seeds:
    ``d_T <= d <= d_T+eps``; candidates: ``|d| < d_T``.
    """
    if d_T <= 0 or eps <= 0:
        raise ConfigError("d_T and eps must be positive")
    d = as_array(sdm)
    fg = (d >= -(d_T + eps)) & (d <= -d_T)
    bg = (d >= d_T) & (d <= d_T + eps)
    cand = np.abs(d) < d_T
    if require_seeds and (not fg.any() or not bg.any()):
        raise DegenerateDataError("no foreground or background seeds in the distance bands")
    return NodeSelection(fg, bg, cand, float(d_T), float(eps))


def lattice_weight(I_i, I_j, delta: float = DELTA):
    return np.exp(-delta * (np.asarray(I_i, dtype=np.float64) - np.asarray(I_j, dtype=np.float64)) ** 2)


def terminal_weights(e_F, e_B):
    """``(w_F, w_B) = (e_B, e_F) / (e_F + e_B)``; ``(0.5, 0.5)`` when both vanish."""
    e_F = np.asarray(e_F, dtype=np.float64)
    e_B = np.asarray(e_B, dtype=np.float64)
    total = e_F + e_B
    safe = np.where(total > 0, total, 1.0)
    w_F = np.where(total > 0, e_B / safe, 0.5)
    w_B = np.where(total > 0, e_F / safe, 0.5)
    if w_F.ndim == 0:
        return float(w_F), float(w_B)
    return w_F, w_B


@dataclass(frozen=True)
class FusionGraph:
    """Reduced graph over candidate voxels only.

    ``edges``/``edge_w`` link candidate pairs. ``bnd_node``, ``bnd_voxel``,
    ``bnd_w`` and ``bnd_value`` list lattice links from a candidate to a
    fixed neighbour (seed or out-of-band voxel) and that neighbour's value.
    """

    shape: tuple[int, int, int]
    voxels: np.ndarray  # (n, 3)
    index: np.ndarray  # volume of candidate ids, -1 elsewhere
    edges: np.ndarray  # (E, 2)
    edge_w: np.ndarray
    bnd_node: np.ndarray
    bnd_voxel: np.ndarray  # flat index of the fixed neighbour
    bnd_w: np.ndarray
    bnd_value: np.ndarray
    w_F: np.ndarray
    w_B: np.ndarray

    @property
    def n(self) -> int:
        return self.voxels.shape[0]


def build_graph(selection: NodeSelection, intensity, w_F, w_B, delta: float = DELTA,
                current_labels=None) -> FusionGraph:
    img = np.asarray(as_array(intensity), dtype=np.float64)
    cand = selection.candidates
    if img.shape != cand.shape:
        raise ShapeError("intensity and selection differ in shape")
    voxels = np.argwhere(cand)
    n = voxels.shape[0]
    w_F = np.broadcast_to(np.asarray(w_F, dtype=np.float64), (n,)).copy()
    w_B = np.broadcast_to(np.asarray(w_B, dtype=np.float64), (n,)).copy()
    index = np.full(cand.shape, -1, dtype=np.int64)
    index[tuple(voxels.T)] = np.arange(n)
    if current_labels is None:
        fixed_value = selection.fg_seeds.astype(np.float64)
    else:
        fixed_value = (as_array(current_labels) > 0).astype(np.float64)
    fixed_value = np.where(selection.fg_seeds, 1.0, np.where(selection.bg_seeds, 0.0, fixed_value))

    shape = np.array(cand.shape)
    edges, edge_w = [], []
    bnd = ([], [], [], [])
    for off in _NEIGHBOURS:
        nb = voxels + off
        inside = np.all((nb >= 0) & (nb < shape), axis=1)
        src = np.flatnonzero(inside)
        nbv = nb[inside]
        w = lattice_weight(img[tuple(voxels[src].T)], img[tuple(nbv.T)], delta)
        dst = index[tuple(nbv.T)]
        is_cand = dst >= 0
        # each candidate pair once: keep the direction with the smaller source id
        pair = is_cand & (src < dst)
        edges.append(np.stack([src[pair], dst[pair]], axis=1))
        edge_w.append(w[pair])
        fixed = ~is_cand
        bnd[0].append(src[fixed])
        bnd[1].append(np.ravel_multi_index(tuple(nbv[fixed].T), cand.shape))
        bnd[2].append(w[fixed])
        bnd[3].append(fixed_value[tuple(nbv[fixed].T)])
    return FusionGraph(tuple(int(s) for s in cand.shape), voxels, index,
                       np.concatenate(edges).reshape(-1, 2), np.concatenate(edge_w),
                       *(np.concatenate(b) for b in bnd), w_F, w_B)


def system(graph: FusionGraph):
    """Sparse matrix and right-hand side of the energy's stationarity conditions."""
    n = graph.n
    w2 = graph.edge_w ** 2
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    diag = graph.w_F ** 2 + graph.w_B ** 2
    diag = diag + np.bincount(i, w2, n) + np.bincount(j, w2, n)
    diag = diag + np.bincount(graph.bnd_node, graph.bnd_w ** 2, n)
    rhs = graph.w_F ** 2 + np.bincount(graph.bnd_node, graph.bnd_w ** 2 * graph.bnd_value, n)
    rows = np.concatenate([np.arange(n), i, j])
    cols = np.concatenate([np.arange(n), j, i])
    vals = np.concatenate([diag, -w2, -w2])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n)), rhs


def _check_anchored(graph: FusionGraph):
    n = graph.n
    adj = sparse.coo_matrix((np.ones(len(graph.edges)), (graph.edges[:, 0], graph.edges[:, 1])),
                            shape=(n, n))
    n_comp, comp = csgraph.connected_components(adj, directed=False)
    anchor = graph.w_F ** 2 + graph.w_B ** 2 + np.bincount(graph.bnd_node, graph.bnd_w ** 2, n)
    anchored = np.bincount(comp, anchor, n_comp) > 0
    if not anchored.all():
        bad = int(np.flatnonzero(~anchored)[0])
        first = graph.voxels[np.flatnonzero(comp == bad)[0]]
        raise NumericError(f"singular system: component {bad} (containing voxel "
                           f"{tuple(int(v) for v in first)}) has no boundary or terminal weight")


def solve_random_walker(graph: FusionGraph) -> np.ndarray:
    """Foreground probability of every candidate."""
    if graph.n == 0:
        return np.zeros(0)
    _check_anchored(graph)
    L, rhs = system(graph)
    if graph.n > CG_THRESHOLD:
        x, info = spla.cg(L, rhs, rtol=CG_TOL, atol=0.0, maxiter=10 * graph.n)
        if info != 0:
            raise NumericError(f"conjugate gradient did not converge (info={info})")
    else:
        x = spla.spsolve(L.tocsc(), rhs)
    if not np.all(np.isfinite(x)):
        raise NumericError("random walker solve produced non-finite values")
    return np.clip(x, 0.0, 1.0)


def energy(graph: FusionGraph, x) -> float:
    """Quadratic energy of a candidate assignment with all fixed values applied."""
    x = np.asarray(x, dtype=np.float64)
    e = np.sum(graph.w_F ** 2 * (x - 1) ** 2 + graph.w_B ** 2 * x ** 2)
    e += np.sum(graph.edge_w ** 2 * (x[graph.edges[:, 0]] - x[graph.edges[:, 1]]) ** 2)
    e += np.sum(graph.bnd_w ** 2 * (x[graph.bnd_node] - graph.bnd_value) ** 2)
    return float(e)


def solve_explicit(graph: FusionGraph) -> np.ndarray:
    """Same problem solved on the unreduced graph.

    Builds the full weighted Laplacian over candidates, every fixed
    neighbour voxel and two atlas terminal nodes, then solves the Dirichlet
    problem ``L_UU x_U = -L_UM x_M`` for the candidate block. Dense; meant
    for small graphs.
    """
    n = graph.n
    fixed_ids, inverse = np.unique(graph.bnd_voxel, return_inverse=True)
    fixed_val = np.zeros(fixed_ids.size)
    fixed_val[inverse] = graph.bnd_value
    n_fixed = fixed_ids.size
    total = n + n_fixed + 2
    term_F, term_B = n + n_fixed, n + n_fixed + 1
    W = np.zeros((total, total))
    for (a, b), w in zip(graph.edges, graph.edge_w):
        W[a, b] += w ** 2
        W[b, a] += w ** 2
    for a, f, w in zip(graph.bnd_node, inverse, graph.bnd_w):
        W[a, n + f] += w ** 2
        W[n + f, a] += w ** 2
    W[np.arange(n), term_F] += graph.w_F ** 2
    W[term_F, np.arange(n)] += graph.w_F ** 2
    W[np.arange(n), term_B] += graph.w_B ** 2
    W[term_B, np.arange(n)] += graph.w_B ** 2
    L = np.diag(W.sum(axis=1)) - W
    x_M = np.concatenate([fixed_val, [1.0, 0.0]])
    return np.linalg.solve(L[:n, :n], -L[:n, n:] @ x_M)


def update_labels(x, selection: NodeSelection, current) -> Volume:
    """Candidates become foreground iff ``x >= 0.5``; other voxels keep their label."""
    out = (as_array(current) > 0).astype(np.uint8)
    vox = selection.candidate_voxels
    x = np.asarray(x)
    if vox.shape[0]:
        out[tuple(vox.T)] = (x >= 0.5).astype(np.uint8)
    return Volume(out, "label")


def probability_volume(x, selection: NodeSelection, current) -> Volume:
    p = (as_array(current) > 0).astype(np.float64)
    vox = selection.candidate_voxels
    if vox.shape[0]:
        p[tuple(vox.T)] = x
    return Volume(p, "probability")


# --------------------------------------------------------------------------
# several structures

@dataclass(frozen=True)
class ProbabilityStack:
    probs: np.ndarray  # (K, *shape), structure j at index j-1

    @property
    def background(self) -> np.ndarray:
        return 1.0 - self.probs.max(axis=0)


def multiclass_combine(stack: ProbabilityStack):
    """Softmax over background and all structures, then argmax.

    Ties among structures go to the lowest structure id; background wins
    only when strictly most probable. Returns ``(labels, softmax)``.
    """
    probs = np.asarray(stack.probs, dtype=np.float64)
    if probs.ndim < 2 or probs.shape[0] < 1:
        raise ShapeError("need at least one structure probability map")
    p0 = 1.0 - probs.max(axis=0)
    allp = np.concatenate([p0[None], probs])
    e = np.exp(allp - allp.max(axis=0, keepdims=True))
    soft = e / e.sum(axis=0, keepdims=True)
    best_struct = probs.argmax(axis=0)
    best_p = np.take_along_axis(probs, best_struct[None], axis=0)[0]
    labels = np.where(p0 > best_p, 0, best_struct + 1).astype(np.uint8)
    if labels.ndim == 3:
        return Volume(labels, "label"), soft
    return labels, soft
