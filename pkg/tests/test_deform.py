import numpy as np
import pytest

from mgsnet.deform import bilinear_sample, deform_conv_backward, deform_conv_forward
from mgsnet.ops import ConvParams, conv2d_backward, conv2d_forward
from mgsnet.tensor import ShapeError

from cases import away_from_integers, deform_case, deform_grad_errors
from oracles import bilinear_ref, deform_brute


def test_bilinear_spec_example():
    plane = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(plane, 0.5, 0.5) == 1.5
    assert bilinear_sample(plane, 1.0, 1.0) == 3.0
    assert bilinear_sample(plane, -1.0, 0.0) == 0.0
    assert bilinear_sample(plane, 1.5, 0.0) == pytest.approx(1.0)


def test_bilinear_matches_floor_cell_reference():
    rng = np.random.default_rng(0)
    plane = rng.normal(size=(5, 4))
    for qy, qx in rng.uniform(-1.5, 5.5, size=(200, 2)):
        assert bilinear_sample(plane, qy, qx) == pytest.approx(
            bilinear_ref(plane.tolist(), qy, qx), abs=1e-13)
    # integer coordinates are exact under either cell convention
    for y in range(-1, 6):
        for x in range(-1, 5):
            inside = 0 <= y < 5 and 0 <= x < 4
            assert bilinear_sample(plane, y, x) == (plane[y, x] if inside else 0.0)


@pytest.mark.parametrize("seed", range(6))
def test_forward_matches_tap_by_tap_reference(seed):
    x, p, off, _ = deform_case(seed)
    ref = deform_brute(x, p.weight, p.bias, off, p.stride, p.padding, p.dilation)
    np.testing.assert_allclose(deform_conv_forward(x, p, off), ref, rtol=1e-12, atol=1e-12)


def test_integer_offsets_shift_the_grid():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 6, 6))
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
    off = np.zeros((1, 18, 6, 6))
    off[:, 0::2] = 1.0
    # shifting every tap down by one row equals convolving the row-shifted input,
    # away from the top border where the shifted conv reads padding instead
    shifted = np.zeros_like(x)
    shifted[:, :, :-1] = x[:, :, 1:]
    np.testing.assert_allclose(deform_conv_forward(x, p, off)[:, :, 1:],
                               conv2d_forward(shifted, p)[:, :, 1:], atol=1e-12)


def test_zero_offsets_equal_standard_conv_bit_exactly():
    for seed in range(20):
        x, p, off, gy = deform_case(seed)
        zero = np.zeros_like(off)
        np.testing.assert_array_equal(deform_conv_forward(x, p, zero), conv2d_forward(x, p))
        gx, gw, gb, _ = deform_conv_backward(x, p, zero, gy)
        cx, cw, cb = conv2d_backward(x, p, gy)
        np.testing.assert_array_equal(gx, cx)
        np.testing.assert_array_equal(gw, cw)
        np.testing.assert_array_equal(gb, cb)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    errs = deform_grad_errors(seed)
    assert max(errs.values()) <= 1e-5, errs


def test_far_out_of_bounds_reads_zero():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 4, 4))
    p = ConvParams(rng.normal(size=(1, 1, 3, 3)), np.array([0.25]))
    off = np.full((1, 18, 4, 4), 50.5)
    y = deform_conv_forward(x, p, off)
    np.testing.assert_array_equal(y, np.full_like(y, 0.25))
    gx, _, _, goff = deform_conv_backward(x, p, off, np.ones_like(y))
    assert not gx.any() and not goff.any()


def test_offset_shape_error_names_expected_extent():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 5, 5))
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)))
    with pytest.raises(ShapeError, match=r"\(1, 18, 5, 5\)"):
        deform_conv_forward(x, p, np.zeros((1, 18, 4, 5)))
    with pytest.raises(ShapeError):
        deform_conv_forward(x, p, away_from_integers(rng, (1, 16, 5, 5)))


def test_bilinear_half_pixel_outside_corner():
    plane = np.array([[4.0, 9.0], [7.0, 1.0]])
    assert bilinear_sample(plane, -0.5, -0.5) == 1.0
    assert bilinear_sample(plane, 1, 0) == 7.0


def test_zero_grad_out_gives_zero_gradients():
    x, p, off, gy = deform_case(11)
    for g in deform_conv_backward(x, p, off, np.zeros_like(gy)):
        assert not g.any()


def test_random_offsets_single_image_matches_reference():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 1, 5, 5))
    p = ConvParams(rng.normal(size=(1, 1, 3, 3)), rng.normal(size=1))
    off = rng.uniform(-2.5, 2.5, size=(1, 18, 5, 5))
    np.testing.assert_allclose(deform_conv_forward(x, p, off),
                               deform_brute(x, p.weight, p.bias, off), atol=1e-12)


def test_zero_offsets_bit_exact_for_pointwise_single_output():
    # one output channel makes the contraction a matrix-vector product, which
    # is sensitive to operand layout
    rng = np.random.default_rng(95)
    x = rng.normal(size=(1, 5, 15, 9))
    p = ConvParams(rng.normal(size=(1, 5, 1, 1)), rng.normal(size=1))
    y = deform_conv_forward(x, p, np.zeros((1, 2, 15, 9)))
    assert y.tobytes() == conv2d_forward(x, p).tobytes()
