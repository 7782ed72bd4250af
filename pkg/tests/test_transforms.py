import numpy as np
import pytest

from zfda.data import gen_synthetic
from zfda.transforms import VA, VC, VH, VP, Transform, apply_transform, hue_matrix

IMAGES = gen_synthetic(4, seed=9).images


@pytest.mark.parametrize("kind,param", [(VA, 0.0), (VP, 0.0), (VC, 1.0), (VH, 0.0)])
def test_identity_parameters_are_bit_exact(kind, param):
    out = apply_transform(IMAGES, Transform(kind, param))
    assert out.tobytes() == IMAGES.tobytes()


def test_contrast_fixed_point():
    gray = np.full((3, 5, 5), 0.5, np.float32)
    assert np.array_equal(apply_transform(gray, Transform(VC, 2.0)), gray)


def test_contrast_formula_and_clamp():
    x = np.array([[[[0.0, 0.25, 0.5, 0.9]]]], np.float32)
    out = apply_transform(x, Transform(VC, 2.0))
    np.testing.assert_allclose(out[0, 0, 0], [0.0, 0.0, 0.5, 1.0])


def test_rotation_by_right_angle_is_index_permutation():
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 9, 9)).astype(np.float32)
    out = apply_transform(x, Transform(VA, 90.0))
    # counter-clockwise as displayed with rows pointing down
    np.testing.assert_allclose(out, np.rot90(x, 1, axes=(2, 3)), atol=1e-6)


def test_rotation_fills_corners_with_zero():
    x = np.ones((1, 1, 8, 8), np.float32)
    out = apply_transform(x, Transform(VA, 45.0))
    assert out[0, 0, 0, 0] == 0.0
    assert out[0, 0, 4, 4] == pytest.approx(1.0)


def test_perspective_pulls_top_corners_in():
    x = np.ones((1, 1, 16, 16), np.float32)
    out = apply_transform(x, Transform(VP, 0.4))
    assert out[0, 0, 0, 0] == 0.0 and out[0, 0, 0, 15] == 0.0
    assert out[0, 0, 15, 0] == pytest.approx(1.0) and out[0, 0, 0, 8] == pytest.approx(1.0)


def test_hue_rotation_keeps_gray_and_composes():
    gray = np.full((1, 3, 2, 2), 0.3, np.float32)
    np.testing.assert_allclose(apply_transform(gray, Transform(VH, 60.0)), gray, atol=1e-6)
    np.testing.assert_allclose(hue_matrix(60) @ hue_matrix(60), hue_matrix(120), atol=1e-12)
    np.testing.assert_allclose(hue_matrix(120) @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_outputs_stay_in_unit_range():
    for kind in (VA, VP, VC, VH):
        out = apply_transform(IMAGES, Transform.default(kind))
        assert out.dtype == IMAGES.dtype and out.shape == IMAGES.shape
        assert out.min() >= 0 and out.max() <= 1


def test_non_finite_parameter_rejected():
    with pytest.raises(ValueError):
        Transform(VA, float("nan"))
    with pytest.raises(ValueError):
        Transform("blur", 1.0)
