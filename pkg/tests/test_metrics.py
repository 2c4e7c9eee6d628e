import csv

import numpy as np
import pytest

from fslf.errors import DataError, ShapeError
from fslf.metrics import boundary, dice, hausdorff, report, write_reports
from oracles import brute_boundary, brute_hausdorff


def test_dice_examples():
    a = np.zeros((3, 3, 3), bool)
    a[0, 0, :2] = True
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[2, 2, 2] = True
    assert dice(a, b) == 0.0
    c = np.zeros_like(a)
    c[0, 0, 1:3] = True
    assert dice(a, c) == 0.5
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_boundary_matches_oracle(rng):
    m = rng.random((7, 7, 7)) < 0.6
    np.testing.assert_array_equal(boundary(m), brute_boundary(m))


def test_hausdorff_examples():
    a = np.zeros((8, 8, 8), bool)
    a[1, 4, 4] = True
    assert hausdorff(a, a) == 0.0
    b = np.zeros_like(a)
    b[4, 4, 4] = True
    assert hausdorff(a, b) == 3.0


def test_hausdorff_nested_masks(rng):
    outer = np.zeros((8, 8, 8), bool)
    outer[1:7, 1:7, 1:7] = True
    inner = np.zeros_like(outer)
    inner[3:5, 3:5, 3:5] = True
    assert hausdorff(inner, outer) == pytest.approx(brute_hausdorff(inner, outer))


def test_hausdorff_needs_both_masks():
    with pytest.raises(DataError):
        hausdorff(np.zeros((3, 3, 3)), np.ones((3, 3, 3)))


def test_report_and_csv(tmp_path):
    truth = np.zeros((6, 6, 6), np.uint8)
    truth[1:4, 1:4, 1:4] = 1
    rows = [report("fslf", 1, 3, truth, truth), report("mv", 2, 0, truth, truth)]
    assert rows[0].dice == 1.0 and rows[0].hausdorff == 0.0
    assert rows[1].dice == 1.0 and rows[1].hausdorff == float("inf")
    write_reports(tmp_path / "r.csv", rows)
    with open(tmp_path / "r.csv") as fh:
        got = list(csv.DictReader(fh))
    assert [r["method"] for r in got] == ["fslf", "mv"]
    assert set(got[0]) == {"method", "structure", "iteration", "dice", "hausdorff"}
