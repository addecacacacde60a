import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import points_in_view, random_scene_pose
from pointloc.errors import DegenerateConfiguration, DegenerateDepth, NoConsensus, ProposalFallbackWarning
from pointloc.geometry import Pose, exp_se3, project, rre, rte
from pointloc.pnp import (
    PnPProblem,
    SamplerConfig,
    cost,
    exp_se3_batch,
    fit_weights,
    gradient,
    inlier_mass_fraction,
    kl_loss,
    p3p,
    refine_weighted,
    reprojection_errors,
    residual,
    residuals,
    solve_epnp,
    solve_ransac,
)


def make_problem(rng, camera, n=20, noise=0.0, outliers=0.0, depth=(1.0, 30.0)):
    pose = random_scene_pose(rng)
    X = points_in_view(pose, camera, n, rng, depth)
    px, _, _ = project(pose.transform(X), camera)
    px = px + rng.normal(scale=noise, size=px.shape) if noise else px
    bad = rng.random(n) < outliers
    px[bad] = rng.uniform([0, 0], [camera.width, camera.height], size=(bad.sum(), 2))
    return PnPProblem(X, px, None, camera), pose, ~bad


def numeric_jacobian(problem, pose, h=1e-6):
    J = np.zeros((len(problem) * 2, 6))
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        fp, _ = residuals(problem, exp_se3(e) @ pose, jacobian=False)
        fm, _ = residuals(problem, exp_se3(-e) @ pose, jacobian=False)
        J[:, k] = (fp - fm).ravel() / (2 * h)
    return J


class TestResiduals:
    def test_jacobian_matches_central_differences(self, rng, camera):
        prob, pose, _ = make_problem(rng, camera, 30)
        prob = prob.with_weights(rng.uniform(0.2, 2, (30, 2)))
        pose = exp_se3(rng.normal(scale=0.01, size=6)) @ pose
        _, J = residuals(prob, pose)
        Jn = numeric_jacobian(prob, pose)
        np.testing.assert_allclose(J.reshape(-1, 6), Jn, rtol=1e-5, atol=1e-5)

    def test_single_residual_block(self, rng, camera):
        prob, pose, _ = make_problem(rng, camera, 3)
        blk = residual(prob.points[1], prob.pixels[1] + [1.0, -2.0], [2.0, 3.0], pose, camera)
        np.testing.assert_allclose(blk.f, [-2.0, 6.0], atol=1e-9)
        assert blk.jacobian.shape == (2, 6)

    def test_degenerate_depth(self, camera):
        with pytest.raises(DegenerateDepth):
            residual([0, 0, -1.0], [0, 0], [1, 1], Pose.identity(), camera)
        with pytest.raises(DegenerateDepth):
            residual([0, 0, 0.0], [0, 0], [1, 1], Pose.identity(), camera)

    def test_reprojection_errors_flag_points_behind(self, camera):
        prob = PnPProblem([[0, 0, 2.0], [0, 0, -2.0]], [[320, 240], [0, 0]], None, camera)
        err = reprojection_errors(prob, Pose.identity())
        assert err[0] == 0 and err[1] == np.inf

    def test_exp_batch_matches_scalar(self, rng):
        xi = rng.normal(size=(20, 6))
        xi[0, 3:] = 0
        xi[1, 3:] = 1e-10
        R, t = exp_se3_batch(xi)
        for k in range(20):
            p = exp_se3(xi[k])
            np.testing.assert_allclose(R[k], p.rotation, atol=1e-12)
            np.testing.assert_allclose(t[k], p.translation, atol=1e-12)


class TestEpnp:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(6, 40))
    def test_noiseless_recovery(self, camera, seed, n):
        rng = np.random.default_rng(seed)
        prob, pose, _ = make_problem(rng, camera, n)
        est = refine_weighted(prob, solve_epnp(prob)).pose
        assert rte(est, pose) < 1e-6
        assert rre(est, pose) < 1e-6

    def test_planar_points(self, rng, camera):
        pose = random_scene_pose(rng)
        X = points_in_view(pose, camera, 200, rng, (2.0, 20.0))
        # fit the plane through the first three points and project the rest onto it
        nrm = np.cross(X[1] - X[0], X[2] - X[0])
        nrm /= np.linalg.norm(nrm)
        X = X - np.outer((X - X[0]) @ nrm, nrm)
        px, z, valid = project(pose.transform(X), camera)
        keep = valid & (z > 0.5)
        prob = PnPProblem(X[keep][:30], px[keep][:30], None, camera)
        est = solve_epnp(prob)
        assert rte(est, pose) < 1e-6 and rre(est, pose) < 1e-6

    def test_degenerate_inputs(self, rng, camera):
        prob, _, _ = make_problem(rng, camera, 3)
        with pytest.raises(DegenerateConfiguration):
            solve_epnp(prob)
        line = np.outer(np.linspace(1, 5, 8), [0.1, 0.2, 1.0])
        px, _, _ = project(line, camera)
        with pytest.raises(DegenerateConfiguration):
            solve_epnp(PnPProblem(line, px, None, camera))


class TestRefine:
    def test_first_order_optimality_with_noise(self, rng, camera):
        prob, pose, _ = make_problem(rng, camera, 50, noise=1.0)
        prob = prob.with_weights(rng.uniform(0.5, 2, (50, 2)))
        res = refine_weighted(prob, exp_se3(rng.normal(scale=0.02, size=6)) @ pose)
        assert res.converged
        assert np.linalg.norm(gradient(prob, res.pose)) < 1e-6
        assert all(b <= a for a, b in zip(res.history, res.history[1:]))

    def test_cost_permutation_invariant(self, rng, camera):
        prob, pose, _ = make_problem(rng, camera, 40, noise=0.5)
        perm = rng.permutation(40)
        shuffled = PnPProblem(prob.points[perm], prob.pixels[perm], prob.weights[perm], camera)
        assert cost(shuffled, pose) == pytest.approx(cost(prob, pose), rel=1e-14)
        a = refine_weighted(prob, pose)
        b = refine_weighted(shuffled, pose)
        assert a.iterations == b.iterations
        assert a.pose.allclose(b.pose, atol=1e-10)

    def test_zero_weight_pair_is_ignored_exactly(self, rng, camera):
        prob, pose, _ = make_problem(rng, camera, 30, noise=0.5)
        w = prob.weights.copy()
        w[4] = 0
        a = refine_weighted(prob.with_weights(w), pose)
        moved = PnPProblem(prob.points.copy(), prob.pixels.copy(), w, camera)
        moved.points[4] = [1e3, -1e3, 5.0]
        moved.pixels[4] = [-50.0, 9e3]
        b = refine_weighted(moved, pose)
        np.testing.assert_array_equal(a.pose.as_matrix(), b.pose.as_matrix())

    def test_exact_start_is_converged(self, rng, camera):
        prob, pose, _ = make_problem(rng, camera, 10)
        res = refine_weighted(prob, pose)
        assert res.converged and res.cost < 1e-20

    def test_singular_system_is_reported(self, camera):
        # a single on-axis point: rotation about the optical axis has a zero
        # column, so the normal equations are singular
        prob = PnPProblem([[0, 0, 5.0]], [[330.0, 240.0]], None, camera)
        res = refine_weighted(prob, Pose.identity())
        assert res.singular and not res.converged
        assert res.pose.allclose(Pose.identity()) and res.cost == 50.0


class TestP3P:
    def test_recovers_true_pose_among_solutions(self, rng, camera):
        for _ in range(20):
            prob, pose, _ = make_problem(rng, camera, 3, depth=(2.0, 15.0))
            h = np.column_stack([prob.pixels, np.ones(3)]) @ np.linalg.inv(camera.intrinsics).T
            rays = h / np.linalg.norm(h, axis=1, keepdims=True)
            R, t, sample = p3p(prob.points[None], rays[None])
            assert np.all(sample == 0) and 1 <= len(R) <= 4
            best = min(rte(Pose(r, tt), pose) + rre(Pose(r, tt), pose) for r, tt in zip(R, t))
            assert best < 1e-6

    def test_polynomial_helpers_match_numpy(self, rng):
        from pointloc.pnp import _polyadd, _polymul, _polyval

        p, q = rng.normal(size=(1, 3)), rng.normal(size=(1, 4))
        np.testing.assert_allclose(_polymul(p, q)[0], np.polynomial.polynomial.polymul(p[0], q[0]))
        np.testing.assert_allclose(_polyadd(p, q)[0], np.polynomial.polynomial.polyadd(p[0], q[0]))
        x = rng.normal(size=(1, 5))
        np.testing.assert_allclose(_polyval(q, x)[0], np.polynomial.polynomial.polyval(x[0], q[0]))


class TestRansac:
    def test_recovers_pose_with_outliers(self, rng, camera):
        prob, pose, inl = make_problem(rng, camera, 100, noise=0.5, outliers=0.5)
        rs = solve_ransac(prob, 1000, 4.0, seed=1)
        assert rte(rs.pose, pose) < 0.05 and rre(rs.pose, pose) < 0.5
        assert np.mean(rs.inliers[inl]) > 0.9

    def test_seeded_determinism(self, rng, camera):
        prob, _, _ = make_problem(rng, camera, 60, noise=0.5, outliers=0.4)
        a = solve_ransac(prob, 300, seed=5)
        b = solve_ransac(prob, 300, seed=5)
        np.testing.assert_array_equal(a.pose.as_matrix(), b.pose.as_matrix())
        np.testing.assert_array_equal(a.inliers, b.inliers)

    def test_pure_noise_has_no_consensus(self, camera):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            X = rng.uniform(-5, 5, (60, 3)) + [0, 0, 10]
            px = rng.uniform([0, 0], [640, 480], (60, 2))
            with pytest.raises(NoConsensus):
                solve_ransac(PnPProblem(X, px, None, camera), 1000, 2.0, seed=seed)

    def test_too_few_pairs(self, rng, camera):
        prob, _, _ = make_problem(rng, camera, 3)
        with pytest.raises(DegenerateConfiguration):
            solve_ransac(prob)

    def test_confidence_stops_early(self, rng, camera):
        prob, pose, _ = make_problem(rng, camera, 80, noise=0.3, outliers=0.1)
        rs = solve_ransac(prob, 1000, seed=0, confidence=0.99)
        assert rs.iterations < 1000
        assert rte(rs.pose, pose) < 0.05

    def test_subset_scoring(self, rng, camera):
        prob, pose, _ = make_problem(rng, camera, 600, noise=0.3, outliers=0.3)
        rs = solve_ransac(prob, 300, seed=0, score_points=100)
        assert rte(rs.pose, pose) < 0.05 and rs.n_inliers > 350


@pytest.fixture(scope="module")
def problem(camera):
    return make_problem(np.random.default_rng(3), camera, 20, noise=1.0)


class TestKl:
    def test_standard_error_nonnegative(self, problem):
        prob, pose, _ = problem
        est = kl_loss(prob, pose)
        assert est.standard_error >= 0 and np.isfinite(est.loss)
        assert est.loss == pytest.approx(est.data_term + est.log_partition)

    def test_laplace_limit(self, problem):
        # for a nearly quadratic cost the log-partition tends to
        # -c(y*) + 3 log(2 pi) - 0.5 log det H
        from pointloc.pnp import _normal_equations

        prob, pose, _ = problem
        est = kl_loss(prob, pose, SamplerConfig(n_samples=20000, seed=1))
        c, _, H = _normal_equations(prob, est.center)
        laplace = -c + 3 * np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(H)[1]
        assert est.log_partition == pytest.approx(laplace, abs=5 * est.standard_error + 1e-3)

    def test_seeded(self, problem):
        prob, pose, _ = problem
        assert kl_loss(prob, pose).loss == kl_loss(prob, pose).loss

    def test_fallback_proposal_warns(self, camera):
        prob = PnPProblem([[0, 0, 5.0], [0.1, 0, 5.0]], [[320.0, 240.0], [330.0, 240.0]], None, camera)
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            est = kl_loss(prob, Pose.identity(), center=Pose.identity())
        assert est.fallback
        assert any(issubclass(w.category, ProposalFallbackWarning) for w in rec)

    def test_all_zero_weights_give_constant_loss(self, problem, rng):
        prob, pose, _ = problem
        zero = prob.with_weights(np.zeros((len(prob), 2)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ProposalFallbackWarning)
            vals = [kl_loss(zero, exp_se3(rng.normal(scale=0.1, size=6)) @ pose).loss for _ in range(3)]
        assert vals[0] == vals[1] == vals[2]

    def test_inlier_weights_lower_the_loss(self, camera):
        rng = np.random.default_rng(8)
        prob, pose, inl = make_problem(rng, camera, 12, noise=0.5, outliers=0.3)
        base = kl_loss(prob, pose).loss
        w = np.where(inl[:, None], 1.5, 0.5) * np.ones((12, 2))
        assert kl_loss(prob.with_weights(w), pose).loss < base


class TestFitWeights:
    def test_monotone_trajectory(self, camera):
        rng = np.random.default_rng(2)
        prob, pose, inl = make_problem(rng, camera, 10, noise=0.5, outliers=0.3)
        traj = fit_weights(prob, pose, inl, steps=2, cfg=SamplerConfig(n_samples=256))
        assert len(traj) == 3
        for a, b in zip(traj, traj[1:]):
            assert b.loss < a.loss
            assert b.inlier_fraction > a.inlier_fraction

    def test_inlier_mass_fraction(self):
        w = np.array([[1.0, 1.0], [3.0, 3.0]])
        assert inlier_mass_fraction(w, np.array([False, True])) == 0.75
