import numpy as np
import pytest

from fslf.errors import ConfigError
from fslf.metrics import dice
from fslf.pipeline import FusionParams, compute_priors, iterate_segmentation, prepare_structure, segment
from fslf.volume import generate_phantom, gradient_magnitude, majority_vote

SMALL = (32, 32, 32)


@pytest.fixture(scope="module")
def small_case():
    target = generate_phantom(99, 2, 0.05, 1.0, shape=SMALL)
    atlases = [generate_phantom(i, 2, 0.05, 1.0, shape=SMALL) for i in range(3)]
    return target, atlases


def test_default_parameters():
    p = FusionParams()
    assert (p.k_per_feature, p.window, p.d_T, p.eps, p.delta, p.n_iters) == (32, 9, 2, 1, 5, 3)
    assert p.patch_side == 5


def test_params_must_be_positive():
    with pytest.raises(ConfigError):
        FusionParams(k_per_feature=0)
    with pytest.raises(ConfigError):
        FusionParams(delta=-1)


def test_self_atlas_is_exact_after_one_iteration():
    img, lab = generate_phantom(4, 2, 0.05, 1.0, shape=SMALL)
    res = iterate_segmentation(img, [(img, lab)] * 2, 1, 1, truth=lab)
    assert res.status == "ok"
    assert res.dice_trace[-1] == 1.0
    assert len(res.maps) == 1


def test_thin_structure_keeps_initial_map():
    img = np.zeros((16, 16, 16))
    lab = np.zeros((16, 16, 16), np.uint8)
    lab[8, 8, 8] = 1  # too thin for any foreground seed band
    res = iterate_segmentation(img, [(img, lab)], 1, 2, truth=lab)
    assert res.status == "degenerate"
    np.testing.assert_array_equal(res.labels.data, lab)


def test_segment_outputs_and_improves_on_vote(small_case):
    (img, truth), atlases = small_case
    res = segment(img, atlases, [1, 2], FusionParams(n_iters=2), truth=truth)
    assert len(res.maps) == 2
    mv = majority_vote([lab for _, lab in atlases])
    for s in (1, 2):
        d_mv = dice(mv.data == s, truth.data == s)
        d_fused = dice(res.labels.data == s, truth.data == s)
        assert d_fused >= d_mv
        assert len(res.structures[s].dice_trace) == 3
    assert set(np.unique(res.labels.data)) <= {0, 1, 2}


def test_segment_is_deterministic(small_case):
    (img, _), atlases = small_case
    p = FusionParams(n_iters=1)
    a = segment(img, atlases, [1], p)
    b = segment(img, atlases, [1], p)
    assert a.labels.data.tobytes() == b.labels.data.tobytes()


def test_priors_are_cached_per_voxel(small_case):
    (img, _), atlases = small_case
    init = majority_vote([lab for _, lab in atlases])
    model = prepare_structure(atlases, 1, init, FusionParams())
    grad = gradient_magnitude(img)
    vox = np.argwhere(init.data == 1)[:5]
    cache = {}
    first = compute_priors(model, img, grad, vox, FusionParams(), cache)
    assert len(cache) == 5
    again = compute_priors(model, img, grad, vox[::-1], FusionParams(), cache)
    assert [p.w_F for p in again] == [p.w_F for p in first[::-1]]
    for p in first:
        assert p.w_F + p.w_B == pytest.approx(1.0)


@pytest.mark.slow
def test_noise_free_dice_does_not_drop_over_iterations():
    non_decreasing = 0
    for seed in range(10):
        img, truth = generate_phantom(1000 * seed + 99, 2, 0.0, 1.5)
        atlases = [generate_phantom(1000 * seed + i, 2, 0.0, 1.5) for i in range(5)]
        res = iterate_segmentation(img, atlases, 1, 3, truth=truth)
        trace = np.array(res.dice_trace)
        non_decreasing += bool(np.all(np.diff(trace) >= -1e-12))
    assert non_decreasing >= 8
