"""End-to-end label fusion: signature training, atlas dictionaries,
per-candidate reconstruction priors and the iterative random-walker loop.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ann_matching as ann
from . import cnn_signature as cnn
from . import fslp
from . import rw_fusion as rw
from .errors import ConfigError, DegenerateDataError
from .feature_bank import FeatureBank, build_bank, roi_mask, voxel_features
from .metrics import dice
from .volume import (Volume, as_array, extract_axial_patches, gradient_magnitude, histogram_match,
                     majority_vote, signed_distance_map)

log = logging.getLogger(__name__)


@dataclass
class FusionParams:
    k_per_feature: int = 32
    window: int = 9
    d_T: float = 2.0
    eps: float = 1.0
    delta: float = 5.0
    n_iters: int = 3
    patch_side: int = 5
    n_trees: int = 4
    max_checks: int = 256
    roi_radius: float = 4.0
    fslp_max_iters: int = 10
    fslp_tol: float = 1e-4
    train_epochs: int = 6
    train_lr: float = 0.05
    train_batch: int = 32
    train_patches: int = 1200
    n_quantiles: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("k_per_feature", "window", "d_T", "eps", "delta", "n_iters", "patch_side",
                     "n_trees", "max_checks", "roi_radius", "fslp_max_iters", "fslp_tol",
                     "train_epochs", "train_batch", "train_patches", "n_quantiles"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")


@dataclass
class StructureModel:
    structure: int
    net: cnn.SignatureNet
    bank: FeatureBank
    forests: list
    train_losses: np.ndarray | None = None
    train_accuracy: float | None = None


# --------------------------------------------------------------------------
# signature network

def training_patches(atlases, structure: int, roi, n_patches: int, seed=0, size: int = cnn.PATCH_SIZE):
    """Class-balanced 2D patches around ROI voxels of the atlases."""
    rng = np.random.default_rng(seed)
    voxels = np.argwhere(np.asarray(roi, dtype=bool))
    pool_x, pool_y = [], []
    for img, lab in atlases:
        lab_a = as_array(lab)
        y = (lab_a[tuple(voxels.T)] == structure).astype(np.int64)
        pool_x.append(np.column_stack([np.full(len(voxels), len(pool_x)), voxels]))
        pool_y.append(y)
    origins = np.concatenate(pool_x)
    labels = np.concatenate(pool_y)
    per_class = n_patches // 2
    picked = []
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        if idx.size:
            picked.append(rng.choice(idx, size=min(per_class, idx.size), replace=False))
    picked = np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)
    patches = np.empty((picked.size, size, size))
    for image_id, (img, _) in enumerate(atlases):
        rows = picked[origins[picked, 0] == image_id]
        mask = np.isin(picked, rows)
        patches[mask] = extract_axial_patches(img, origins[rows, 1:], size)
    return patches, labels[picked]


def train_signature_net(atlases, structure: int, roi, params: FusionParams):
    patches, labels = training_patches(atlases, structure, roi, params.train_patches, params.seed)
    if np.unique(labels).size < 2:
        raise DegenerateDataError(f"structure {structure}: ROI holds a single class")
    net = cnn.init_net(params.seed + 1000 * structure)
    net, losses = cnn.train(net, patches, labels, params.train_epochs, params.train_lr,
                            params.seed, params.train_batch)
    acc = cnn.accuracy(net, patches, labels)
    log.info("structure %d: signature net trained, accuracy %.3f", structure, acc)
    return net, losses, acc


def prepare_structure(atlases, structure: int, init_labels, params: FusionParams,
                      net: cnn.SignatureNet | None = None) -> StructureModel:
    roi = roi_mask(init_labels, structure, params.roi_radius)
    losses = acc = None
    if net is None:
        net, losses, acc = train_signature_net(atlases, structure, roi, params)
    bank = build_bank(atlases, structure, roi, net, params.patch_side)
    forests = [ann.build_forest(seg, params.n_trees, params.seed + j, params.max_checks)
               for j, seg in enumerate(bank.segments)]
    return StructureModel(structure, net, bank, forests, losses, acc)


# --------------------------------------------------------------------------
# reconstruction priors

@dataclass
class VoxelPrior:
    w_F: float
    w_B: float
    alpha: np.ndarray  # nan when no candidate survived
    e_F: float
    e_B: float
    n_candidates: int


def compute_priors(model: StructureModel, target_img, target_grad, voxels, params: FusionParams,
                   cache: dict | None = None) -> list[VoxelPrior]:
    """Terminal weights for ``voxels``; results are memoised in ``cache`` by voxel."""
    cache = {} if cache is None else cache
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    keys = [tuple(int(c) for c in v) for v in voxels]
    todo = [i for i, key in enumerate(keys) if key not in cache]
    if todo:
        vox = voxels[todo]
        segs = voxel_features(vox, target_img, target_grad, model.net, params.patch_side)
        cands = ann.select_candidates_batch(vox, segs, model.forests, model.bank.labels,
                                            model.bank.origins, params.k_per_feature, params.window)
        y_all = np.hstack(segs)
        lengths = model.bank.segment_lengths
        for row, cs in zip(range(len(todo)), cands):
            key = keys[todo[row]]
            if len(cs) == 0:
                cache[key] = VoxelPrior(0.5, 0.5, np.full(3, np.nan), np.nan, np.nan, 0)
                continue
            problem = fslp.FslpProblem(y_all[row], model.bank.matrix(cs.entries), cs.labels, lengths)
            sol = fslp.alternate(problem, max_iters=params.fslp_max_iters, tol=params.fslp_tol)
            w_F, w_B = rw.terminal_weights(sol.e_F, sol.e_B)
            cache[key] = VoxelPrior(w_F, w_B, sol.alpha, sol.e_F, sol.e_B, len(cs))
    return [cache[key] for key in keys]


# --------------------------------------------------------------------------
# iterative fusion for one structure

@dataclass
class StructureResult:
    structure: int
    labels: Volume
    probability: Volume
    maps: list = field(default_factory=list)  # label Volume per iteration
    probabilities: list = field(default_factory=list)
    dice_trace: list = field(default_factory=list)  # initial map first, then per iteration
    n_candidates: list = field(default_factory=list)
    alpha: dict = field(default_factory=dict)  # voxel -> alpha for the last iteration's candidates
    status: str = "ok"


def iterate_segmentation(target_img, atlases, structure: int, n_iters: int | None = None, *,
                         init_labels=None, model: StructureModel | None = None, truth=None,
                         params: FusionParams | None = None) -> StructureResult:
    """Alternate node selection, prior estimation and the random-walker solve.

    ``atlases`` are ``(intensity, labels)`` pairs already aligned with the
    target. ``init_labels`` defaults to the majority vote of the atlas labels.
    """
    params = params or FusionParams()
    n_iters = params.n_iters if n_iters is None else int(n_iters)
    if n_iters < 1:
        raise ConfigError("n_iters must be at least 1")
    atlases = list(atlases)
    if init_labels is None:
        init_labels = majority_vote([lab for _, lab in atlases])
    img = np.asarray(as_array(target_img), dtype=np.float64)
    grad = gradient_magnitude(img)
    current = Volume((as_array(init_labels) == structure).astype(np.uint8), "label")
    result = StructureResult(structure, current, Volume(current.data.astype(float), "probability"))
    if truth is not None:
        result.dice_trace.append(dice(current.data, as_array(truth) == structure))
    try:
        if model is None:
            model = prepare_structure(atlases, structure, init_labels, params)
    except DegenerateDataError as exc:
        log.warning("structure %d: %s; keeping the initial map", structure, exc)
        result.status = "degenerate"
        return result
    cache: dict = {}
    for it in range(1, n_iters + 1):
        sdm = signed_distance_map(current, 1)
        try:
            sel = rw.select_nodes(sdm, params.d_T, params.eps)
        except DegenerateDataError as exc:
            log.warning("structure %d, iteration %d: %s", structure, it, exc)
            if it == 1:
                result.status = "degenerate"
            break
        vox = sel.candidate_voxels
        priors = compute_priors(model, img, grad, vox, params, cache)
        w_F = np.array([p.w_F for p in priors])
        w_B = np.array([p.w_B for p in priors])
        graph = rw.build_graph(sel, img, w_F, w_B, params.delta, current)
        x = rw.solve_random_walker(graph)
        prob = rw.probability_volume(x, sel, current)
        current = rw.update_labels(x, sel, current)
        result.maps.append(current)
        result.probabilities.append(prob)
        result.n_candidates.append(len(vox))
        result.alpha = {tuple(int(c) for c in v): p.alpha for v, p in zip(vox, priors)}
        result.labels, result.probability = current, prob
        if truth is not None:
            result.dice_trace.append(dice(current.data, as_array(truth) == structure))
    return result


# --------------------------------------------------------------------------
# all structures

@dataclass
class SegmentationResult:
    labels: Volume
    initial: Volume
    maps: list  # combined label map per iteration
    structures: dict  # structure id -> StructureResult
    matched_atlases: list


def segment(target_img, atlases, structures=None, params: FusionParams | None = None, *,
            truth=None, nets: dict | None = None, match_histograms: bool = True) -> SegmentationResult:
    """Fuse all ``structures`` and combine them into one label map."""
    params = params or FusionParams()
    atlases = list(atlases)
    if match_histograms:
        atlases = [(histogram_match(img, target_img, params.n_quantiles), lab) for img, lab in atlases]
    init = majority_vote([lab for _, lab in atlases])
    if structures is None:
        structures = sorted(int(s) for s in np.unique(np.concatenate(
            [np.unique(as_array(lab)) for _, lab in atlases])) if s > 0)
    nets = nets or {}
    per = {}
    for s in structures:
        model = None
        if s in nets:
            model = prepare_structure(atlases, s, init, params, net=nets[s])
        per[s] = iterate_segmentation(target_img, atlases, s, params.n_iters, init_labels=init,
                                      model=model, truth=truth, params=params)
    maps = []
    for it in range(params.n_iters):
        probs = []
        for s in structures:
            r = per[s]
            if r.probabilities:
                probs.append(as_array(r.probabilities[min(it, len(r.probabilities) - 1)]))
            else:
                probs.append(as_array(r.probability))
        maps.append(rw.multiclass_combine(rw.ProbabilityStack(np.stack(probs)))[0]
                    if probs else init)
    final = maps[-1] if maps else init
    if structures:
        final = Volume(np.asarray(_relabel(final, structures), dtype=np.uint8), "label")
        maps = [Volume(np.asarray(_relabel(m, structures), dtype=np.uint8), "label") for m in maps]
    return SegmentationResult(final, init, maps, per, atlases)


def _relabel(labels, structures):
    # stack position j-1 -> actual structure id
    lut = np.zeros(len(structures) + 1, dtype=np.uint8)
    lut[1:] = structures
    return lut[as_array(labels)]
