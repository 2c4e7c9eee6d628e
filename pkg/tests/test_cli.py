import csv
import json
import shutil

import numpy as np
import pytest

from fslf import cli
from fslf import cnn_signature as cnn
from fslf.errors import NumericError
from fslf.metrics import dice, hausdorff
from fslf.volume import majority_vote, read_svol

FAST = ["--train-patches", "300", "--train-epochs", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small synthesized data set with trained nets and one segmentation."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["synth", "--out", str(data), "--n-atlases", "3", "--size", "32",
                     "--seed", "1"]) == 0
    assert cli.main(["train-signature", "--manifest", str(data), *FAST]) == 0
    assert cli.main(["segment", "--manifest", str(data), "--n-iters", "2", "--slice", "16"]) == 0
    return data


def test_synth_writes_atlases_and_manifest(workspace):
    man = json.loads((workspace / "manifest.json").read_text())
    assert len(man["atlases"]) == 3
    for entry in man["atlases"] + [man["target"]]:
        assert (workspace / entry["image"]).exists() and (workspace / entry["labels"]).exists()
    assert read_svol(workspace / man["target"]["labels"]).kind == "label"


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--out", str(tmp_path / name), "--n-atlases", "1",
                         "--size", "16"]) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_synth_rejects_zero_atlases(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--n-atlases", "0"]) == 2


def test_training_outputs(workspace):
    nets = workspace / "nets"
    for s in (1, 2):
        net = cnn.load_net(nets / f"structure{s}.snet")
        assert net.signature_length == 18
        with open(nets / f"structure{s}_loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
    summary = json.loads((nets / "training.json").read_text())
    assert set(summary) == {"1", "2"}


def test_checkpoint_reload_reproduces_outputs(workspace, rng):
    path = workspace / "nets" / "structure1.snet"
    a, b = cnn.load_net(path), cnn.load_net(path)
    patches = rng.random((3, 20, 20))
    np.testing.assert_array_equal(cnn.forward_batch(a, patches)[1], cnn.forward_batch(b, patches)[1])


def test_train_on_separable_phantom_reaches_accuracy(tmp_path):
    data = tmp_path / "d"
    assert cli.main(["synth", "--out", str(data), "--n-atlases", "3", "--noise", "0.02",
                     "--n-structures", "1"]) == 0
    assert cli.main(["train-signature", "--manifest", str(data)]) == 0
    summary = json.loads((data / "nets" / "training.json").read_text())
    assert summary["1"]["accuracy"] >= 0.95


def test_single_class_roi_is_data_error(workspace, tmp_path):
    assert cli.main(["train-signature", "--manifest", str(workspace), "--structures", "7",
                     "--nets", str(tmp_path), *FAST]) == 3


def test_missing_manifest_is_config_error(tmp_path):
    assert cli.main(["train-signature", "--manifest", str(tmp_path / "nowhere")]) == 2


def test_segment_outputs(workspace):
    seg = workspace / "segmentation"
    maps = sorted(seg.glob("iteration*.svol"))
    assert [m.name for m in maps] == ["iteration1.svol", "iteration2.svol"]
    assert read_svol(seg / "final.svol").data.tobytes() == read_svol(maps[-1]).data.tobytes()
    status = json.loads((seg / "status.json").read_text())
    assert {v["status"] for v in status.values()} == {"ok"}
    with open(seg / "dice_trace.csv") as fh:
        trace = list(csv.DictReader(fh))
    assert [(r["structure"], r["iteration"]) for r in trace] == [
        (s, i) for s in ("1", "2") for i in ("0", "1", "2")]


def test_coefficient_image_is_on_the_simplex(workspace):
    img = cli.read_pnm(workspace / "segmentation" / "coefficients_structure1_z16.ppm")
    rows = cli.read_alpha_csv(workspace / "segmentation" / "alpha_structure1.csv")
    colored = [(v, a) for v, a in rows if v[2] == 16 and np.all(np.isfinite(a))]
    assert colored
    for (x, y, _), _a in colored:
        assert int(img[y, x].sum()) == 255


def test_largest_remainder_sums_exactly(rng):
    a = rng.dirichlet(np.ones(3), 500)
    rgb = cli.largest_remainder_rgb(a)
    np.testing.assert_array_equal(rgb.sum(axis=1), 255)
    assert np.max(np.abs(rgb - 255 * a)) < 1


def test_segment_without_nets_is_config_error(workspace, tmp_path):
    assert cli.main(["segment", "--manifest", str(workspace), "--nets", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 2


def test_segment_is_deterministic(workspace, tmp_path):
    assert cli.main(["segment", "--manifest", str(workspace), "--n-iters", "2",
                     "--out", str(tmp_path / "again")]) == 0
    a = (workspace / "segmentation" / "final.svol").read_bytes()
    assert (tmp_path / "again" / "final.svol").read_bytes() == a


def test_evaluate_rows_and_baseline(workspace, tmp_path):
    out = tmp_path / "r.csv"
    assert cli.main(["evaluate", "--manifest", str(workspace), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2
    man = cli.load_manifest(workspace)
    truth = read_svol(man["target_labels"]).data
    mv = majority_vote([read_svol(l).data for _, l in man["atlases"]]).data
    for r in rows:
        if r["method"] == "mv":
            s = int(r["structure"])
            assert float(r["dice"]) == pytest.approx(dice(mv == s, truth == s), abs=1e-12)
            assert float(r["hausdorff"]) == pytest.approx(hausdorff(mv == s, truth == s), abs=1e-12)


def test_evaluate_truth_against_itself(workspace, tmp_path):
    man = cli.load_manifest(workspace)
    out = tmp_path / "r.csv"
    assert cli.main(["evaluate", "--manifest", str(workspace), "--prediction",
                     str(man["target_labels"]), "--out", str(out)]) == 0
    with open(out) as fh:
        fslf_rows = [r for r in csv.DictReader(fh) if r["method"] == "fslf"]
    assert all(float(r["dice"]) == 1.0 and float(r["hausdorff"]) == 0.0 for r in fslf_rows)


def test_evaluate_missing_prediction(workspace, tmp_path):
    assert cli.main(["evaluate", "--manifest", str(workspace), "--prediction",
                     str(tmp_path / "none.svol")]) == 2


def test_self_atlas_segmentation_is_exact(workspace, tmp_path):
    man = json.loads((workspace / "manifest.json").read_text())
    for name in (man["target"]["image"], man["target"]["labels"]):
        shutil.copy(workspace / name, tmp_path / name)
    man["atlases"] = [man["target"], man["target"]]
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    shutil.copytree(workspace / "nets", tmp_path / "nets")
    assert cli.main(["segment", "--manifest", str(tmp_path), "--n-iters", "1"]) == 0
    final = read_svol(tmp_path / "segmentation" / "final.svol").data
    truth = read_svol(tmp_path / man["target"]["labels"]).data
    for s in (1, 2):
        assert dice(final == s, truth == s) == 1.0


def test_export_slice_pgm_and_ppm(workspace, tmp_path):
    man = cli.load_manifest(workspace)
    out = tmp_path / "s.pgm"
    assert cli.main(["export-slice", "--input", str(man["target_image"]), "--index", "10",
                     "--out", str(out)]) == 0
    img = cli.read_pnm(out)
    assert img.shape == (32, 32) and img.min() >= 0 and img.max() <= 255
    out = tmp_path / "s.ppm"
    assert cli.main(["export-slice", "--input", str(man["target_image"]), "--index", "16",
                     "--alpha", str(workspace / "segmentation" / "alpha_structure2.csv"),
                     "--out", str(out)]) == 0
    assert cli.read_pnm(out).shape == (32, 32, 3)
    assert cli.main(["export-slice", "--input", str(man["target_image"]), "--index", "99"]) == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# phantom settings\nn_atlases = 2\nsize = 16\n")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert len(json.loads((tmp_path / "a" / "manifest.json").read_text())["atlases"]) == 2
    assert cli.main(["synth", "--config", str(cfg), "--n-atlases", "1",
                     "--out", str(tmp_path / "b")]) == 0
    assert len(json.loads((tmp_path / "b" / "manifest.json").read_text())["atlases"]) == 1
    (tmp_path / "bad.cfg").write_text("colour = red\n")
    assert cli.main(["synth", "--config", str(tmp_path / "bad.cfg")]) == 2
    assert cli.main(["synth", "--config", str(tmp_path / "none.cfg")]) == 2


def test_cli_defaults_equal_fusion_defaults():
    args = cli.build_parser().parse_args(["segment"])
    params = cli.fusion_params(cli.merged_options(args, cli._ALLOWED["segment"]))
    assert (params.k_per_feature, params.window, params.d_T, params.eps, params.delta,
            params.n_iters) == (32, 9, 2, 1, 5, 3)


def test_negative_parameter_is_config_error(workspace):
    assert cli.main(["segment", "--manifest", str(workspace), "--delta", "-1"]) == 2


def test_corrupt_volume_is_data_error(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--n-atlases", "1", "--size", "16"]) == 0
    (tmp_path / "target_image.svol").write_bytes(b"SVOL")
    assert cli.main(["export-slice", "--input", str(tmp_path / "target_image.svol"),
                     "--index", "0"]) == 3


def test_numeric_failure_exit_code(monkeypatch):
    def boom(opts):
        raise NumericError("singular")
    monkeypatch.setitem(cli._COMMANDS, "synth", boom)
    assert cli.main(["synth"]) == 4


def test_thread_cap_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("FSLF_THREADS", "1")
    assert cli.worker_count() == 1
    assert cli.main(["synth", "--out", str(tmp_path), "--n-atlases", "1", "--size", "16"]) == 0
    monkeypatch.setenv("FSLF_THREADS", "zero")
    assert cli.main(["synth", "--out", str(tmp_path), "--n-atlases", "1", "--size", "16"]) == 2
    monkeypatch.setenv("FSLF_THREADS", "0")
    assert cli.main(["synth", "--out", str(tmp_path)]) == 2


def test_unknown_verb_is_usage_error():
    assert cli.main(["explode"]) == 2
