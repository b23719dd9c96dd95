import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from lane_resim.schemas.geometry import STANDARD_POSE, CameraIntrinsics, CameraPose, LensModel
from lane_resim.services.geometry import (GeometryError, Homography, ImageBuffer, VehiclePose, bilinear_sample,
                                          compose_pose, ground_plane_homography, ground_points_from_pixels,
                                          horizon_row, project_points, quantize_unit, rectify_pinhole,
                                          rotation_homography, warp_viewpoint)

INTR = CameraIntrinsics()

poses = st.builds(
    lambda dx, dy, dz, yaw, pitch: CameraPose(position=(1.77 + dx, dy, 1.47 + dz), yaw=yaw, pitch=pitch),
    st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-0.3, 0.3),
    st.floats(-0.1, 0.1), st.floats(-0.05, 0.05),
)


def _ground_pixels():
    u, v = np.meshgrid(np.linspace(60, 320, 6), np.linspace(160, 210, 4))
    return np.stack([u.ravel(), v.ravel()], axis=1)


@settings(max_examples=60, deadline=None)
@given(a=poses, b=poses, c=poses)
def test_ground_homography_composes(a, b, c):
    direct = ground_plane_homography(a, c, INTR)
    chained = ground_plane_homography(b, c, INTR) @ ground_plane_homography(a, b, INTR)
    np.testing.assert_allclose(chained.matrix, direct.matrix, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(a=poses, b=poses)
def test_ground_homography_matches_projection(a, b):
    ground = ground_points_from_pixels(_ground_pixels(), a, INTR)
    pts = np.column_stack([ground, np.zeros(len(ground))])
    uv_a, _ = project_points(pts, a, INTR)
    uv_b, depth_b = project_points(pts, b, INTR)
    assert np.all(depth_b > 0)
    np.testing.assert_allclose(ground_plane_homography(a, b, INTR).apply(uv_a), uv_b, rtol=1e-9, atol=1e-6)


def test_rotation_homography_ignores_translation():
    a = CameraPose(position=(0.0, 0.0, 1.5), yaw=0.05)
    b = CameraPose(position=(3.0, -1.0, 1.2), yaw=-0.02, pitch=0.01)
    moved = CameraPose(position=(10.0, 5.0, 2.0), yaw=-0.02, pitch=0.01)
    np.testing.assert_allclose(rotation_homography(a, b, INTR).matrix, rotation_homography(a, moved, INTR).matrix)


def test_identity_warp_is_bit_exact(rng):
    img = ImageBuffer(rng.random((INTR.height, INTR.width, 1)).astype(np.float32))
    out = warp_viewpoint(img, STANDARD_POSE, STANDARD_POSE, INTR)
    assert out.image.same_as(img)
    assert out.valid_fraction == 1.0
    assert out.valid_mask.all()


def test_shifted_warp_loses_some_pixels(rng):
    img = ImageBuffer(rng.random((INTR.height, INTR.width, 1)).astype(np.float32))
    target = compose_pose(VehiclePose(0.0, -1.0, np.radians(3.0)), STANDARD_POSE)
    out = warp_viewpoint(img, STANDARD_POSE, target, INTR)
    assert 0.5 < out.valid_fraction < 1.0
    assert np.all(out.image.pixels[~out.valid_mask] == 0.0)


def test_horizon_row_follows_pitch():
    assert horizon_row(STANDARD_POSE, INTR) == pytest.approx(INTR.cy)
    pitched = CameraPose(pitch=0.05)
    assert horizon_row(pitched, INTR) == pytest.approx(INTR.cy - INTR.fy * np.tan(0.05), abs=1e-9)


def test_ground_back_projection_round_trip():
    pose = CameraPose(position=(2.0, 0.3, 1.4), yaw=0.1, pitch=0.02)
    pixels = _ground_pixels()
    ground = ground_points_from_pixels(pixels, pose, INTR)
    uv, depth = project_points(np.column_stack([ground, np.zeros(len(ground))]), pose, INTR)
    assert np.all(depth > 0)
    np.testing.assert_allclose(uv, pixels, atol=1e-9)


def test_sky_pixels_do_not_hit_ground():
    ground = ground_points_from_pixels(np.array([[192.0, 10.0]]), STANDARD_POSE, INTR)
    assert np.all(np.isnan(ground))


def test_compose_pose_rotates_mount_offset():
    cam = CameraPose(position=(1.0, 0.5, 1.2))
    world = compose_pose(VehiclePose(10.0, 20.0, np.pi / 2), cam)
    np.testing.assert_allclose(world.position, (9.5, 21.0, 1.2), atol=1e-12)
    assert world.yaw == pytest.approx(np.pi / 2)


def test_bilinear_sample_is_exact_at_integer_coordinates(rng):
    pixels = rng.random((10, 12, 3)).astype(np.float32)
    v, u = np.mgrid[0:10, 0:12]
    out, valid = bilinear_sample(pixels, u.astype(float), v.astype(float))
    assert valid.all()
    assert np.array_equal(out.astype(np.float32), pixels)


def test_bilinear_sample_marks_outside_invalid():
    pixels = np.ones((4, 4, 1), dtype=np.float32)
    out, valid = bilinear_sample(pixels, np.array([-0.1, 3.0, 3.01]), np.array([0.0, 3.0, 0.0]))
    assert valid.tolist() == [False, True, False]
    assert out[0, 0] == 0.0 and out[1, 0] == 1.0


def test_degenerate_homographies_raise():
    with pytest.raises(GeometryError):
        Homography(np.zeros((3, 3)))
    with pytest.raises(GeometryError):
        ground_plane_homography(CameraPose(position=(0.0, 0.0, 0.0)), STANDARD_POSE, INTR)


def test_image_buffer_validates_range():
    with pytest.raises(GeometryError):
        ImageBuffer(np.full((2, 2), 1.5))
    with pytest.raises(GeometryError):
        ImageBuffer(np.zeros((2, 2, 2)))


def test_lens_model_rejects_non_monotone_distortion():
    with pytest.raises(ValidationError):
        LensModel(k1=-0.5)


def test_rectify_identity_lens_is_copy(rng):
    img = ImageBuffer(rng.random((INTR.height, INTR.width, 1)).astype(np.float32))
    assert rectify_pinhole(img, LensModel(), INTR, INTR).same_as(img)


def test_rectify_checks_monotonicity_over_raster(rng):
    lens = LensModel(k1=-0.6, r_max=0.5)
    img = ImageBuffer(rng.random((INTR.height, INTR.width, 1)).astype(np.float32))
    with pytest.raises(GeometryError):
        rectify_pinhole(img, lens, INTR, INTR)


def test_rectify_undoes_barrel_distortion():
    """畸变图像中的一个亮点经校正后回到针孔投影位置"""
    lens = LensModel(k1=-0.1, r_max=1.0)
    xn, yn = 0.4, 0.3
    f = lens.factor(np.array(xn * xn + yn * yn))
    u_d, v_d = INTR.fx * xn * f + INTR.cx, INTR.fy * yn * f + INTR.cy
    img = np.zeros((INTR.height, INTR.width))
    img[int(round(float(v_d))), int(round(float(u_d)))] = 1.0
    out = rectify_pinhole(ImageBuffer(img), lens, INTR, INTR).pixels[..., 0]
    v, u = np.unravel_index(np.argmax(out), out.shape)
    assert abs(u - (INTR.fx * xn + INTR.cx)) <= 1.5
    assert abs(v - (INTR.fy * yn + INTR.cy)) <= 1.5


def test_quantize_unit_lands_on_8bit_levels(rng):
    q = quantize_unit(rng.random(1000))
    np.testing.assert_allclose(q * 255.0, np.round(q * 255.0), atol=1e-9)
    assert quantize_unit(np.array([0.5]))[0] == 128 / 255
