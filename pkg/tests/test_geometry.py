import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgsnet.geometry import (CameraIntrinsics, backproject, fit_local_plane, geometric_offsets,
                             learned_offsets, learned_offsets_backward, resample_depth)
from mgsnet.ops import ConvParams
from mgsnet.tensor import ShapeError

from oracles import geometric_offsets_ref, numerical_grad, rel_err


def plane_scene(h, w, K, z0, gx, gy):
    """Depth of the plane Z = z0 + gx*X + gy*Y and its analytic unit normal."""
    v, u = np.mgrid[0:h, 0:w].astype(float)
    depth = z0 / (1.0 - gx * (u - K.cx) / K.fx - gy * (v - K.cy) / K.fy)
    n = np.array([-gx, -gy, 1.0])
    return depth, n / np.linalg.norm(n)


def max_ref_error(depth, K, normal, dil=1):
    off = geometric_offsets(depth[None, None], K, dilation=dil)
    ref = geometric_offsets_ref(depth.tolist(), K.fx, K.fy, K.cx, K.cy,
                                lambda v, u: tuple(normal), dil=dil)
    err = 0.0
    for (v, u, t), (dy, dx) in ref.items():
        err = max(err, abs(off[0, 2 * t, v, u] - dy), abs(off[0, 2 * t + 1, v, u] - dx))
    return err


def test_intrinsics_parse_and_validate():
    K = CameraIntrinsics.parse("500, 510 320 240")
    assert (K.fx, K.fy, K.cx, K.cy) == (500.0, 510.0, 320.0, 240.0)
    assert K.scaled(0.25) == CameraIntrinsics(125.0, 127.5, 80.0, 60.0)
    with pytest.raises(ValueError):
        CameraIntrinsics.parse("1 2 3")
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)


def test_backproject_pinhole():
    K = CameraIntrinsics(2.0, 4.0, 1.0, 1.0)
    depth = np.array([[[[2.0, 0.0], [1.0, 3.0]]]])
    pts, mask = backproject(depth, K)
    np.testing.assert_allclose(pts[0, :, 1, 1], [0.0, 0.0, 3.0])
    np.testing.assert_allclose(pts[0, :, 0, 0], [-1.0, -0.5, 2.0])
    assert mask[0, 0].tolist() == [[True, False], [True, True]]


def test_fronto_parallel_gives_zero_offsets():
    K = CameraIntrinsics(30.0, 30.0, 8.0, 6.0)
    off = geometric_offsets(np.full((2, 1, 12, 16), 2.5), K)
    assert np.max(np.abs(off)) <= 1e-9


def test_fronto_parallel_with_anisotropic_focal_scales_rows():
    # the in-plane grid is spaced Z/fx in metres, so rows land fy/fx apart
    K = CameraIntrinsics(30.0, 45.0, 8.0, 6.0)
    off = geometric_offsets(np.full((1, 1, 12, 16), 2.0), K)
    np.testing.assert_allclose(off[0, 0], -0.5, atol=1e-12)    # tap (0,0): b = -1
    np.testing.assert_allclose(off[0, 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(off[0, 16], 0.5, atol=1e-12)    # tap (2,2): b = +1


@pytest.mark.parametrize("gx,gy,dil", [(0.5, 0.0, 1), (-0.8, 0.0, 1), (0.3, -0.4, 1), (0.6, 0.2, 2)])
def test_ramp_matches_scalar_projection_oracle(gx, gy, dil):
    K = CameraIntrinsics(12.0, 12.0, 7.5, 5.5)
    depth, normal = plane_scene(12, 16, K, 2.0, gx, gy)
    assert max_ref_error(depth, K, normal, dil) <= 1e-6


def test_center_tap_is_zero_and_invalid_pixels_are_zero():
    rng = np.random.default_rng(0)
    depth = rng.uniform(0.5, 3.0, size=(2, 1, 9, 11))
    depth[0, 0, 3, 4] = 0.0
    depth[1, 0, :2] = -1.0
    off = geometric_offsets(depth, CameraIntrinsics(8.0, 9.0, 5.0, 4.0))
    assert not off[:, 8:10].any()
    assert not off[0, :, 3, 4].any()
    assert not off[1, :, :2].any()


def test_isolated_pixel_falls_back_to_fronto_parallel_normal():
    depth = np.zeros((1, 1, 5, 5))
    depth[0, 0, 2, 2] = 1.5
    K = CameraIntrinsics(10.0, 10.0, 2.0, 2.0)
    pts, mask = backproject(depth, K)
    normal = fit_local_plane(pts, mask)
    np.testing.assert_array_equal(normal[0, :, 2, 2], [0.0, 0.0, 1.0])
    # fronto-parallel normal at the principal point: the grid is regular
    assert np.max(np.abs(geometric_offsets(depth, K)[0, :, 2, 2])) < 1e-12


def test_normals_face_the_camera():
    K = CameraIntrinsics(10.0, 10.0, 4.0, 4.0)
    depth, normal = plane_scene(9, 9, K, 3.0, 0.7, -0.2)
    pts, mask = backproject(depth[None, None], K)
    n = fit_local_plane(pts, mask)
    assert (n[0, 2] > 0).all()
    np.testing.assert_allclose(n[0, :, 4, 4], normal, atol=1e-12)


def test_clamp_bounds_offsets():
    K = CameraIntrinsics(12.0, 12.0, 7.5, 5.5)
    depth, _ = plane_scene(12, 16, K, 2.0, 1.8, 0.0)
    off = geometric_offsets(depth[None, None], K, clamp=0.25)
    assert np.max(np.abs(off)) <= 0.25
    assert np.max(np.abs(geometric_offsets(depth[None, None], K))) > 0.25


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(0.1, 10.0), seed=st.integers(0, 1000))
def test_offsets_invariant_to_depth_scale(scale, seed):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(1.0, 2.0, size=(1, 1, 6, 7))
    K = CameraIntrinsics(6.0, 7.0, 3.0, 2.5)
    np.testing.assert_allclose(geometric_offsets(depth * scale, K), geometric_offsets(depth, K),
                               atol=1e-8)


def test_resample_depth_takes_stride_grid():
    d = np.arange(64.0).reshape(1, 1, 8, 8)
    np.testing.assert_array_equal(resample_depth(d, 4)[0, 0], [[0.0, 4.0], [32.0, 36.0]])


def test_learned_offsets_shape_and_gradient():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(2, 1, 5, 4))
    eta = ConvParams(rng.normal(size=(18, 1, 3, 3)), rng.normal(size=18))
    off = learned_offsets(g, eta)
    assert off.shape == (2, 18, 5, 4)
    gy = rng.normal(size=off.shape)
    gg, gw, gb = learned_offsets_backward(g, eta, gy)

    def f():
        return float(np.sum(learned_offsets(g, eta) * gy))

    assert rel_err(gg, numerical_grad(f, g)) < 1e-7
    assert rel_err(gw, numerical_grad(f, eta.weight)) < 1e-7
    with pytest.raises(ShapeError, match="18"):
        learned_offsets(g, ConvParams(np.zeros((16, 1, 3, 3))))


def test_plane_scene_is_planar():
    # sanity check on the test fixture itself
    K = CameraIntrinsics(12.0, 12.0, 7.5, 5.5)
    depth, normal = plane_scene(6, 6, K, 2.0, 0.4, 0.1)
    pts, _ = backproject(depth[None, None], K)
    d = np.tensordot(normal, pts[0], axes=(0, 0))
    assert np.ptp(d) < 1e-12
    assert math.isclose(np.linalg.norm(normal), 1.0)
