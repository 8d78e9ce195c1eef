"""Point-set comparison metrics."""

import numpy as np
import pytest

from tricodec.errors import ShapeError
from tricodec.metrics import chamfer_distance

rng = np.random.default_rng(43)


def test_identical_sets_have_zero_distance():
    a = rng.normal(size=(50, 3))
    assert chamfer_distance(a, a.copy()) == 0.0


def test_known_value_single_points():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert chamfer_distance(a, b) == pytest.approx(2.0, abs=1e-15)  # 1 + 1


def test_known_value_asymmetric_sets():
    a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    b = np.array([[1.0, 0, 0]])
    # a->b: mean(1, 0) = 0.5 ; b->a: 0
    assert chamfer_distance(a, b) == pytest.approx(0.5, abs=1e-15)


def test_symmetry():
    a = rng.normal(size=(40, 3))
    b = rng.normal(size=(25, 3))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a),
                                                   abs=1e-15)


def test_chunking_does_not_change_result():
    a = rng.normal(size=(33, 3))
    b = rng.normal(size=(47, 3))
    full = chamfer_distance(a, b, chunk=100000)
    tiny = chamfer_distance(a, b, chunk=3)
    assert full == pytest.approx(tiny, abs=1e-15)


def test_translation_increases_distance():
    a = rng.normal(size=(60, 3))
    assert chamfer_distance(a, a + np.array([0.5, 0, 0])) > 0.01


def test_empty_sets_rejected():
    with pytest.raises(ShapeError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        chamfer_distance(np.zeros((4, 3)), np.zeros((0, 3)))
