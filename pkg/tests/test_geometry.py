import math

import numpy as np
import pytest

from stream4d.geometry import (CameraPose, Trajectory, abs_rel, accuracy_curve,
                               ate, auc, auc_at_30, delta_accuracy,
                               evaluate_trajectory, load_tum, pair_angle_errors,
                               quat_normalize, quat_to_rot, rot_to_quat,
                               rotation_angle, rpe, rra_rta, save_tum,
                               scale_align_depth, sim3_align, umeyama_alignment)


def random_pose(rng, spread=1.0):
    q = quat_normalize(rng.normal(size=4))
    return CameraPose(q, rng.normal(scale=spread, size=3))


def random_trajectory(rng, n, spread=2.0):
    return Trajectory(np.arange(n, dtype=np.float64),
                      [random_pose(rng, spread) for _ in range(n)])


def random_rotation(rng):
    return quat_to_rot(quat_normalize(rng.normal(size=4)))


class TestQuaternions:
    def test_round_trip(self):
        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(50):
            r = random_rotation(rng)
            back = quat_to_rot(rot_to_quat(r))
            assert rotation_angle(r, back) < 1e-10

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError, match="zero quaternion"):
            quat_normalize(np.zeros(4))

    def test_half_turn_about_z(self):
        r = quat_to_rot(np.array([0.0, 0.0, 0.0, 2.0]))  # normalizes to (0,0,0,1)
        assert np.allclose(r, np.diag([-1.0, -1.0, 1.0]))


class TestUmeyama:
    def test_identity(self):
        rng = np.random.Generator(np.random.PCG64(1))
        pts = rng.normal(size=(6, 3))
        s, r, t = umeyama_alignment(pts, pts)
        assert abs(s - 1.0) < 1e-12
        assert np.abs(r - np.eye(3)).max() < 1e-12
        assert np.abs(t).max() < 1e-12

    def test_double_scale(self):
        rng = np.random.Generator(np.random.PCG64(2))
        gt = rng.normal(size=(5, 3))
        s, _, _ = umeyama_alignment(2.0 * gt, gt)
        assert abs(s - 0.5) < 1e-12

    def test_apply_then_recover(self):
        rng = np.random.Generator(np.random.PCG64(3))
        gt = rng.normal(size=(8, 3))
        r_true = random_rotation(rng)
        s_true, t_true = 1.7, rng.normal(size=3)
        est = (gt - t_true) @ r_true / s_true  # inverse similarity applied to gt
        s, r, t = umeyama_alignment(est, gt)
        assert abs(s - s_true) < 1e-9
        assert np.abs(r - r_true).max() < 1e-9
        assert np.abs(t - t_true).max() < 1e-9

    def test_collinear_rejected(self):
        pts = np.outer(np.arange(5.0), np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValueError, match="degenerate"):
            umeyama_alignment(pts, pts)

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="at least 3"):
            umeyama_alignment(np.ones((2, 3)), np.ones((2, 3)))


class TestAteRpe:
    def test_identical_zero(self):
        rng = np.random.Generator(np.random.PCG64(4))
        traj = random_trajectory(rng, 6)
        assert ate(traj, traj) == 0.0
        t_err, r_err = rpe(traj, traj, 1)
        assert t_err == 0.0 and r_err == 0.0

    def test_alignment_absorbs_uniform_offset(self):
        rng = np.random.Generator(np.random.PCG64(5))
        gt = random_trajectory(rng, 6)
        est = gt.transformed(1.0, np.eye(3), np.array([3.0, -1.0, 2.0]))
        res = evaluate_trajectory(est, gt)
        assert res["ATE"] < 1e-12

    def test_hand_built_rmse(self):
        ts = np.arange(4.0)
        gt = Trajectory(ts, [CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3))
                             for _ in range(4)])
        offsets = [np.zeros(3), np.array([1.0, 0, 0]),
                   np.array([0, 2.0, 0]), np.array([0, 0, 2.0])]
        est = Trajectory(ts, [CameraPose(np.array([1.0, 0, 0, 0]), o) for o in offsets])
        expected = math.sqrt((0.0 + 1.0 + 4.0 + 4.0) / 4.0)
        assert abs(ate(est, gt) - expected) < 1e-12

    def test_rpe_full_delta_single_pair(self):
        rng = np.random.Generator(np.random.PCG64(6))
        est = random_trajectory(rng, 5)
        gt = random_trajectory(rng, 5)
        t_err, r_err = rpe(est, gt, delta=4)
        me, mg = est.matrices(), gt.matrices()
        rel_e = np.linalg.inv(me[0]) @ me[4]
        rel_g = np.linalg.inv(mg[0]) @ mg[4]
        assert abs(t_err - np.linalg.norm(rel_e[:3, 3] - rel_g[:3, 3])) < 1e-12
        assert abs(r_err - math.degrees(rotation_angle(rel_e[:3, :3], rel_g[:3, :3]))) < 1e-12

    def test_sim3_invariance(self):
        rng = np.random.Generator(np.random.PCG64(7))
        gt = random_trajectory(rng, 8)
        est = random_trajectory(rng, 8)
        base = evaluate_trajectory(est, gt)
        warped = est.transformed(2.3, random_rotation(rng), rng.normal(size=3))
        res = evaluate_trajectory(warped, gt)
        for key in base:
            assert abs(res[key] - base[key]) < 1e-9

    def test_rpe_delta_bounds(self):
        rng = np.random.Generator(np.random.PCG64(8))
        traj = random_trajectory(rng, 4)
        with pytest.raises(ValueError, match="delta"):
            rpe(traj, traj, 4)


class TestDepthMetrics:
    def test_exact_prediction(self):
        gt = np.random.default_rng(9).uniform(1.0, 5.0, (8, 8))
        assert abs_rel(gt, gt) == 0.0
        assert delta_accuracy(gt, gt) == 1.0

    def test_scale_absorbed(self):
        gt = np.random.default_rng(10).uniform(1.0, 5.0, (8, 8))
        pred = 2.0 * gt
        aligned, s = scale_align_depth(pred, gt)
        assert abs(s - 0.5) < 1e-12
        assert abs_rel(aligned, gt) < 1e-12

    def test_ratio_1_3_fails_delta(self):
        gt = np.random.default_rng(11).uniform(1.0, 5.0, (8, 8))
        assert delta_accuracy(1.3 * gt, gt) == 0.0
        aligned, _ = scale_align_depth(1.3 * gt, gt)
        assert delta_accuracy(aligned, gt) == 1.0

    def test_delta_symmetric(self):
        gt = np.random.default_rng(12).uniform(1.0, 5.0, (6, 6))
        pred = gt * np.random.default_rng(13).uniform(0.7, 1.4, (6, 6))
        assert delta_accuracy(pred, gt) == delta_accuracy(gt, pred)

    def test_valid_mask_respected(self):
        gt = np.ones((2, 2))
        pred = np.array([[1.0, 1.0], [1.0, 100.0]])
        valid = np.array([[True, True], [True, False]])
        assert abs_rel(pred, gt, valid) == 0.0


class TestPairMetrics:
    def test_perfect_pairs(self):
        rng = np.random.Generator(np.random.PCG64(14))
        poses = [random_pose(rng) for _ in range(5)]
        rra, rta = rra_rta(poses, poses, 30.0)
        assert rra == 1.0 and rta == 1.0
        assert auc_at_30(poses, poses) == 1.0

    def test_known_rotation_error(self):
        gt = [CameraPose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0, 0])),
              CameraPose(np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0]))]
        # estimate rotates the second camera 45 degrees about z
        q45 = np.array([math.cos(math.pi / 8), 0.0, 0.0, math.sin(math.pi / 8)])
        est = [gt[0], CameraPose(q45, gt[1].trans)]
        rot_err, trans_err = pair_angle_errors(est, gt)
        assert abs(rot_err[0] - 45.0) < 1e-9
        rra30, rta30 = rra_rta(est, gt, 30.0)
        assert rra30 == 0.0 and rta30 == 1.0

    def test_auc_bounds(self):
        errors = np.array([0.0, 10.0, 40.0])
        taus = np.arange(1, 31, dtype=np.float64)
        curve = accuracy_curve(errors, taus)
        val = auc(curve, taus)
        assert 0.0 <= val <= 1.0


class TestTrajectoryIO:
    def test_tum_round_trip(self, tmp_path):
        rng = np.random.Generator(np.random.PCG64(15))
        traj = random_trajectory(rng, 5)
        path = tmp_path / "traj.txt"
        save_tum(path, traj)
        back = load_tum(path)
        assert np.array_equal(back.timestamps, traj.timestamps)
        for a, b in zip(back.poses, traj.poses):
            assert np.abs(a.trans - b.trans).max() == 0.0
            assert min(np.abs(a.quat - b.quat).max(), np.abs(a.quat + b.quat).max()) == 0.0

    def test_comments_skipped(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("# header\n0.0 1 2 3 0 0 0 1\n\n1.0 4 5 6 0 0 0 1\n")
        traj = load_tum(path)
        assert len(traj) == 2
        assert np.array_equal(traj.poses[1].trans, [4.0, 5.0, 6.0])

    def test_timestamps_strictly_increasing(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            Trajectory(np.array([0.0, 0.0]),
                       [CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3))] * 2)
