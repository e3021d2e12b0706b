import math

import numpy as np
import pytest

from spatialnav.errors import ContractViolation, InvalidDepthError, OutOfBoundsError
from spatialnav.geometry import (
    AgentPose,
    CameraIntrinsics,
    GridParams,
    RigidTransform,
    VoxelIndex,
    base_to_camera_transform,
    camera_to_world,
    normalize_angle,
    patch_center,
    pixel_to_camera,
    pixels_to_camera,
    pose_to_world_transform,
    project_to_pixel,
    voxel_to_world,
    world_to_voxel,
    world_to_voxels,
)

pytestmark = pytest.mark.unit

GP = GridParams()


class TestPixelToCamera:
    def test_unit_intrinsics_at_origin(self):
        k = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
        assert pixel_to_camera(0, 0, 1.0, k) == (0.0, 0.0, 1.0)

    def test_offset_pixel(self):
        k = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=200, height=200)
        assert pixel_to_camera(150, 50, 2.0, k) == pytest.approx((2.0, 0.0, 2.0))

    @pytest.mark.parametrize("depth", [0.0, -1.0, float("nan"), float("inf")])
    def test_invalid_depth(self, depth):
        k = CameraIntrinsics.from_fov(64, 48, 87)
        with pytest.raises(InvalidDepthError):
            pixel_to_camera(10, 10, depth, k)

    def test_pixel_outside_image(self):
        k = CameraIntrinsics.from_fov(64, 48, 87)
        with pytest.raises(ContractViolation):
            pixel_to_camera(64, 10, 1.0, k)

    def test_projection_inverts_back_projection(self):
        k = CameraIntrinsics.from_fov(64, 48, 87)
        rng = np.random.default_rng(3)
        for _ in range(50):
            u, v = rng.uniform(0, 64), rng.uniform(0, 48)
            d = rng.uniform(0.3, 8.0)
            assert project_to_pixel(pixel_to_camera(u, v, d, k), k) == pytest.approx((u, v))

    def test_vectorised_matches_scalar(self):
        k = CameraIntrinsics.from_fov(64, 48, 87)
        u = np.array([0.0, 12.5, 63.0])
        v = np.array([0.0, 30.0, 47.0])
        d = np.array([0.5, 2.0, 7.5])
        out = pixels_to_camera(u, v, d, k)
        for row, args in zip(out, zip(u, v, d)):
            assert tuple(row) == pytest.approx(pixel_to_camera(*args, k))

    def test_point_behind_camera_does_not_project(self):
        k = CameraIntrinsics.from_fov(64, 48, 87)
        assert project_to_pixel((0.0, 0.0, -1.0), k) is None

    def test_principal_point_outside_image_rejected(self):
        with pytest.raises(ContractViolation):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=10.0, cy=0.0, width=4, height=4)


class TestTransforms:
    def test_quarter_turn(self):
        t = pose_to_world_transform(AgentPose(1.0, 2.0, math.pi / 2))
        assert tuple(t.apply(np.array([1.0, 0.0, 0.0]))) == pytest.approx((1.0, 3.0, 0.0))

    def test_half_turn(self):
        t = pose_to_world_transform(AgentPose(0.0, 0.0, math.pi))
        assert tuple(t.apply(np.array([1.0, 0.0, 0.0]))) == pytest.approx((-1.0, 0.0, 0.0), abs=1e-12)

    def test_camera_looks_along_heading(self):
        t_base_cam = base_to_camera_transform(1.5)
        t_world_base = pose_to_world_transform(AgentPose(2.0, -1.0, 0.0))
        assert camera_to_world((0.0, 0.0, 3.0), t_base_cam, t_world_base) == pytest.approx((5.0, -1.0, 1.5))
        # camera +x (image right) is the agent's right
        assert camera_to_world((1.0, 0.0, 0.0), t_base_cam, t_world_base) == pytest.approx((2.0, -2.0, 1.5))
        # camera +y (image down) lowers z
        assert camera_to_world((0.0, 1.0, 0.0), t_base_cam, t_world_base) == pytest.approx((2.0, -1.0, 0.5))

    def test_compose_matches_sequential_application(self):
        a = pose_to_world_transform(AgentPose(1.0, -2.0, 0.7))
        b = base_to_camera_transform(1.2)
        p = np.array([0.3, -0.4, 2.0])
        assert a.compose(b).apply(p) == pytest.approx(a.apply(b.apply(p)))

    def test_non_rigid_matrix_rejected(self):
        m = np.eye(4)
        m[0, 0] = 2.0
        with pytest.raises(ContractViolation):
            RigidTransform(m)

    def test_reflection_rejected(self):
        m = np.eye(4)
        m[1, 1] = -1.0
        with pytest.raises(ContractViolation, match="reflection"):
            RigidTransform(m)

    def test_nearly_orthonormal_rejected(self):
        m = np.eye(4)
        m[0, 0] = 1.0 + 1e-6
        with pytest.raises(ContractViolation):
            RigidTransform(m)

    def test_yaw_is_normalised(self):
        assert AgentPose(0.0, 0.0, 2.5 * math.pi).yaw == pytest.approx(math.pi / 2)
        assert normalize_angle(-math.pi) == pytest.approx(math.pi)


class TestVoxels:
    def test_origin(self):
        assert world_to_voxel((0.0, 0.0, 0.0), GP) == VoxelIndex(500, 500, 0)

    def test_general_point(self):
        assert world_to_voxel((1.23, -0.45, 0.78), GP) == (512, 495, 7)

    def test_below_floor(self):
        with pytest.raises(OutOfBoundsError):
            world_to_voxel((0.0, 0.0, -0.05), GP)

    def test_outside_grid(self):
        with pytest.raises(OutOfBoundsError):
            world_to_voxel((50.0, 0.0, 0.0), GP)

    @pytest.mark.parametrize("point", [
        (math.nan, 0.0, 0.0),
        (0.0, math.nan, 1.0),
        (0.0, 0.0, math.nan),
        (math.inf, 0.0, 0.0),
        (0.0, -math.inf, 0.5),
    ])
    def test_non_finite_point(self, point):
        with pytest.raises(OutOfBoundsError):
            world_to_voxel(point, GP)

    def test_voxel_centres(self):
        assert voxel_to_world((500, 500, 0), GP) == pytest.approx((0.05, 0.05, 0.05))
        assert voxel_to_world((512, 495, 7), GP) == pytest.approx((1.25, -0.45, 0.75))

    def test_round_trip_stays_in_voxel(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            p = (rng.uniform(-49, 49), rng.uniform(-49, 49), rng.uniform(0, 3))
            v = world_to_voxel(p, GP)
            c = voxel_to_world(v, GP)
            assert world_to_voxel(c, GP) == v
            assert all(abs(a - b) <= GP.delta / 2 + 1e-9 for a, b in zip(p, c))

    def test_vectorised_flags_out_of_bounds(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.23, -0.45, 0.78], [0.0, 0.0, -0.05], [60.0, 0.0, 1.0],
                        [np.nan, 0.0, 1.0], [0.0, np.inf, 1.0]])
        idx, ok = world_to_voxels(pts, GP)
        assert ok.tolist() == [True, True, False, False, False, False]
        assert idx[1].tolist() == [512, 495, 7]

    def test_grid_params_validation(self):
        with pytest.raises(ContractViolation):
            GridParams(delta=0.0)
        with pytest.raises(ContractViolation):
            GridParams(g=999)


@pytest.mark.parametrize("i,j,s,expected", [
    (0, 0, 14, (7, 7)),
    (2, 3, 14, (49, 35)),
    (0, 0, 2, (1, 1)),
])
def test_patch_center(i, j, s, expected):
    assert patch_center(i, j, s) == expected


def test_patch_center_rejects_bad_stride():
    with pytest.raises(ContractViolation):
        patch_center(0, 0, 0)
