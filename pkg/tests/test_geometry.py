import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import points_in_view, random_scene_pose
from pointloc.errors import DataFormatError
from pointloc.geometry import (
    CameraModel,
    Pose,
    exp_se3,
    exp_so3,
    format_pose,
    hat,
    log_se3,
    log_so3,
    nearest_rotation,
    parse_pose,
    project,
    random_rotation,
    read_intrinsics,
    read_poses,
    rotation_angle,
    rre,
    rte,
    write_intrinsics,
    write_poses,
)

vec3 = st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3).map(np.array)
seeds = st.integers(0, 2**32 - 1)


class TestSO3:
    @given(vec3)
    def test_exp_matches_scipy(self, w):
        np.testing.assert_allclose(exp_so3(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)

    @given(vec3)
    def test_exp_is_orthonormal(self, w):
        R = exp_so3(w)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1) < 1e-12

    @given(vec3.filter(lambda w: np.linalg.norm(w) < np.pi - 1e-3))
    def test_log_inverts_exp(self, w):
        np.testing.assert_allclose(log_so3(exp_so3(w)), w, atol=1e-9)

    @pytest.mark.parametrize("axis", [np.array([1.0, 0, 0]), np.array([0, 0.6, 0.8]), np.array([1.0, 1, 1]) / 3**0.5])
    def test_log_near_pi(self, axis):
        for theta in (np.pi, np.pi - 1e-9, np.pi - 1e-7):
            R = Rotation.from_rotvec(axis * theta).as_matrix()
            w = log_so3(R)
            assert abs(np.linalg.norm(w) - theta) < 1e-6
            np.testing.assert_allclose(exp_so3(w), R, atol=1e-7)

    def test_tiny_angles_keep_precision(self):
        for theta in (1e-12, 1e-9, 1e-7, 1e-4):
            R = Rotation.from_rotvec([0, 0, theta]).as_matrix()
            assert rotation_angle(R) == pytest.approx(theta, rel=1e-6)

    def test_hat_is_cross_product(self, rng):
        a, b = rng.normal(size=(2, 3))
        np.testing.assert_allclose(hat(a) @ b, np.cross(a, b), atol=1e-15)

    def test_random_rotation_matches_scipy_statistics(self, rng):
        # uniform rotations have E[trace] = 0
        traces = [np.trace(random_rotation(rng)) for _ in range(4000)]
        assert abs(np.mean(traces)) < 0.06


class TestSE3:
    @given(vec3, vec3.filter(lambda w: np.linalg.norm(w) < 3.0))
    def test_log_inverts_exp(self, v, w):
        xi = np.concatenate([v, w])
        np.testing.assert_allclose(log_se3(exp_se3(xi)), xi, atol=1e-8)

    def test_exp_matches_matrix_exponential(self, rng):
        from scipy.linalg import expm

        for _ in range(20):
            xi = rng.normal(size=6)
            M = np.zeros((4, 4))
            M[:3, :3] = hat(xi[3:])
            M[:3, 3] = xi[:3]
            np.testing.assert_allclose(exp_se3(xi).as_matrix(), expm(M), atol=1e-12)

    def test_compose_and_inverse(self, rng):
        a, b = Pose.random(rng, 3), Pose.random(rng, 3)
        np.testing.assert_allclose((a @ b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)
        assert (a @ a.inverse()).allclose(Pose.identity(), atol=1e-12)

    def test_center_projects_to_origin(self, rng):
        p = Pose.random(rng, 5)
        np.testing.assert_allclose(p.transform(p.center()), 0, atol=1e-12)

    def test_pose_is_immutable(self):
        p = Pose.identity()
        with pytest.raises(ValueError):
            p.rotation[0, 0] = 2.0

    def test_long_chain_drift_is_restored(self, rng):
        # 10^6 compositions of small rotations, re-orthonormalized at the end
        steps = Rotation.from_rotvec(rng.normal(scale=1e-3, size=(1000, 3))).as_matrix()
        R = np.eye(3)
        for _ in range(1000):
            for S in steps:
                R = S @ R
        p = Pose(R, np.zeros(3)).orthonormalized()
        assert p.orthonormality_error() <= 1e-9
        assert abs(np.linalg.det(p.rotation) - 1) <= 1e-9

    def test_nearest_rotation_of_a_rotation_is_itself(self, rng):
        R = random_rotation(rng)
        np.testing.assert_allclose(nearest_rotation(R), R, atol=1e-12)

    def test_nearest_rotation_matches_polar_decomposition(self, rng):
        from scipy.linalg import polar

        M = random_rotation(rng) + rng.normal(scale=0.05, size=(3, 3))
        U, _ = polar(M)
        np.testing.assert_allclose(nearest_rotation(M), U, atol=1e-10)


class TestCamera:
    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ValueError):
            CameraModel(np.diag([-1.0, 1, 1]), 10, 10)
        with pytest.raises(ValueError):
            CameraModel(np.array([[1.0, 0, 50], [0, 1, 5], [0, 0, 1]]), 10, 10)
        with pytest.raises(ValueError):
            CameraModel(np.eye(3), 0, 10)
        with pytest.raises(ValueError):
            CameraModel(np.array([[1.0, 0, 5], [0.1, 1, 5], [0, 0, 1]]), 10, 10)

    def test_from_fov(self):
        cam = CameraModel.from_fov(256, 128, 90.0)
        assert cam.fx == pytest.approx(128.0)
        assert (cam.cx, cam.cy) == (128.0, 64.0)

    def test_project_matches_homogeneous_formula(self, camera, rng):
        P = rng.uniform([-2, -2, 1], [2, 2, 10], size=(50, 3))
        px, z, _ = project(P, camera)
        h = P @ camera.intrinsics.T
        np.testing.assert_allclose(px, h[:, :2] / h[:, 2:], rtol=1e-14)
        np.testing.assert_array_equal(z, P[:, 2])

    def test_project_validity(self, camera):
        P = np.array([[0, 0, 1.0], [0, 0, -1.0], [0, 0, 0.0], [100, 0, 1.0]])
        _, _, valid = project(P, camera)
        np.testing.assert_array_equal(valid, [True, False, False, False])

    def test_single_point(self, camera):
        px, z, ok = project(np.array([0.0, 0.0, 2.0]), camera)
        np.testing.assert_array_equal(px, [320.0, 240.0])
        assert z == 2.0 and ok

    def test_frame_bounds_half_open(self, camera):
        ok = camera.in_frame(np.array([[0, 0], [639.999, 479.999], [640, 0], [0, 480], [-1e-9, 0]]))
        np.testing.assert_array_equal(ok, [True, True, False, False, False])

    def test_backproject_roundtrip(self, camera, rng):
        pix = rng.uniform([0, 0], [640, 480], size=(30, 2))
        z = rng.uniform(1, 30, 30)
        px, zz, _ = project(camera.backproject(pix, z), camera)
        np.testing.assert_allclose(px, pix, atol=1e-10)
        np.testing.assert_allclose(zz, z, rtol=1e-14)

    @settings(max_examples=50)
    @given(seeds)
    def test_projection_equivariance(self, camera, seed):
        rng = np.random.default_rng(seed)
        pose = random_scene_pose(rng)
        X = points_in_view(pose, camera, 20, rng)
        G = Pose.random(rng, 10)  # world-frame rigid motion
        px0, _, _ = project(pose.transform(X), camera)
        px1, _, _ = project((pose @ G.inverse()).transform(G.transform(X)), camera)
        np.testing.assert_allclose(px1, px0, atol=1e-9)


class TestPoseErrors:
    def test_rte_is_translation_distance(self):
        a = Pose(np.eye(3), [1.0, 2, 3])
        b = Pose(exp_so3([0, 0, 1.0]), [1.0, 2, 4])
        assert rte(a, b) == 1.0

    def test_rre_matches_arccos_form(self, rng):
        for _ in range(100):
            a, b = Pose.random(rng), Pose.random(rng)
            c = np.clip((np.trace(a.rotation.T @ b.rotation) - 1) / 2, -1, 1)
            assert rre(a, b) == pytest.approx(np.degrees(np.arccos(c)), abs=1e-6)

    def test_rre_known_angle(self):
        a = Pose.identity()
        b = Pose(exp_so3([0, np.radians(30.0), 0]), np.zeros(3))
        assert rre(a, b) == pytest.approx(30.0, abs=1e-12)

    def test_rre_of_identical_rotation_is_zero(self, rng):
        p = Pose.random(rng)
        assert rre(p, p) == 0.0

    @given(seeds)
    def test_rre_symmetric_and_triangle(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (Pose.random(rng) for _ in range(3))
        assert rre(a, b) == pytest.approx(rre(b, a), abs=1e-9)
        assert rre(a, c) <= rre(a, b) + rre(b, c) + 1e-9


class TestTextFormats:
    def test_pose_file_roundtrip_is_exact(self, tmp_path, rng):
        poses = [Pose.random(rng, 100) for _ in range(5)]
        write_poses(tmp_path / "p.txt", poses)
        back = read_poses(tmp_path / "p.txt")
        for a, b in zip(poses, back):
            np.testing.assert_array_equal(a.as_matrix(), b.as_matrix())

    def test_pose_line_layout_is_row_major(self):
        p = parse_pose("1 2 3 10 4 5 6 20 7 8 9 30")
        np.testing.assert_array_equal(p.rotation, [[1, 2, 3], [4, 5, 6], [7, 8, 9]])
        np.testing.assert_array_equal(p.translation, [10, 20, 30])
        assert format_pose(Pose.identity()).split()[:4] == ["1.0", "0.0", "0.0", "0.0"]

    def test_bad_pose_lines(self, tmp_path):
        with pytest.raises(DataFormatError):
            parse_pose("1 2 3")
        with pytest.raises(DataFormatError):
            parse_pose("1 2 3 4 5 6 7 8 9 10 11 x")
        (tmp_path / "b").write_bytes(b"\xff\xfe\x00binary")
        with pytest.raises(DataFormatError):
            read_poses(tmp_path / "b")

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        (tmp_path / "p.txt").write_text("# header\n\n" + format_pose(Pose.identity()) + "\n")
        assert len(read_poses(tmp_path / "p.txt")) == 1

    def test_intrinsics_roundtrip(self, tmp_path, camera):
        write_intrinsics(tmp_path / "k.txt", camera)
        back = read_intrinsics(tmp_path / "k.txt")
        np.testing.assert_array_equal(back.intrinsics, camera.intrinsics)
        assert (back.width, back.height) == (640, 480)

    def test_intrinsics_without_size_line(self, tmp_path, camera):
        (tmp_path / "k.txt").write_text(" ".join(map(str, camera.intrinsics.ravel())))
        with pytest.raises(DataFormatError):
            read_intrinsics(tmp_path / "k.txt")
        assert read_intrinsics(tmp_path / "k.txt", 640, 480).width == 640

    def test_bad_intrinsics(self, tmp_path):
        (tmp_path / "k.txt").write_text("1 2 3")
        with pytest.raises(DataFormatError):
            read_intrinsics(tmp_path / "k.txt")
        (tmp_path / "k.txt").write_text("-1 0 5 0 1 5 0 0 1\n10 10\n")
        with pytest.raises(DataFormatError):
            read_intrinsics(tmp_path / "k.txt")
