import time

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import DegenerateGeometryError, GradientUnavailableError, NoInformationError
from core.geometry import Se2, rot, rot_derivative, wrap_angle
from core.testing import assert_gradient_close, numerical_gradient

from .services import (
    WeightedCorrespondences,
    pose_loss,
    pose_loss_backward,
    solve_pose,
    solve_pose_backward,
    weighted_sse,
)


def random_pose(rng, spread=10.0):
    return Se2.from_xytheta(*rng.uniform(-spread, spread, 2), rng.uniform(-np.pi, np.pi))


def pose_error(a, b):
    return np.linalg.norm(a.translation - b.translation), abs(wrap_angle(a.theta - b.theta))


class SolvePoseTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(30)

    def test_identity(self):
        q = self.rng.normal(size=(6, 2))
        pose = solve_pose(WeightedCorrespondences.uniform(q, q)).pose
        np.testing.assert_allclose(pose.rotation, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(pose.translation, [0, 0], atol=1e-12)

    def test_pure_translation(self):
        q = self.rng.normal(size=(5, 2))
        pose = solve_pose(WeightedCorrespondences.uniform(q, q + [1.0, 2.0])).pose
        np.testing.assert_allclose(pose.rotation, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(pose.translation, [1.0, 2.0], atol=1e-12)

    def test_quarter_turn(self):
        src = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        dst = src @ rot(np.pi / 2).T
        pose = solve_pose(WeightedCorrespondences.uniform(src, dst)).pose
        np.testing.assert_allclose(pose.rotation, rot(np.pi / 2), atol=1e-12)
        np.testing.assert_allclose(pose.translation, [0, 0], atol=1e-12)

    def test_zero_weight_point_is_inert(self):
        src = self.rng.normal(size=(6, 2))
        dst = self.rng.normal(size=(6, 2))
        w = self.rng.uniform(0.1, 1.0, 6)
        base = solve_pose(WeightedCorrespondences(src, dst, w)).pose
        extra = solve_pose(
            WeightedCorrespondences(np.vstack([src, [50.0, -3.0]]), np.vstack([dst, [-7.0, 8.0]]), np.append(w, 0.0))
        ).pose
        np.testing.assert_allclose(extra.as_matrix(), base.as_matrix(), atol=1e-12)

    def test_beats_random_search(self):
        T = random_pose(self.rng, spread=3.0)
        src = self.rng.normal(scale=4.0, size=(20, 2))
        dst = T.apply(src) + self.rng.normal(scale=0.3, size=(20, 2))
        corr = WeightedCorrespondences(src, dst, self.rng.uniform(0.1, 1.0, 20))
        best = weighted_sse(solve_pose(corr).pose, corr)
        candidates = np.column_stack(
            [self.rng.uniform(-6, 6, (10_000, 2)), self.rng.uniform(-np.pi, np.pi, 10_000)]
        )
        for candidate in candidates:
            self.assertLessEqual(best, weighted_sse(Se2.from_vector(candidate), corr) + 1e-12)

    def test_normal_equations_hold_at_the_solution(self):
        src = self.rng.normal(scale=3.0, size=(15, 2))
        dst = self.rng.normal(scale=3.0, size=(15, 2))
        w = self.rng.uniform(0.1, 2.0, 15)
        pose = solve_pose(WeightedCorrespondences(src, dst, w)).pose
        residual = pose.apply(src) - dst
        grad_t = 2.0 * w @ residual
        grad_theta = 2.0 * np.sum(w * np.sum((src @ rot_derivative(pose.theta).T) * residual, axis=1))
        self.assertLess(np.max(np.abs(grad_t)), 1e-9)
        self.assertLess(abs(grad_theta), 1e-9)

    def test_exact_recovery_on_random_problems(self):
        started = time.perf_counter()
        for _ in range(1000):
            T = random_pose(self.rng)
            n = int(self.rng.integers(3, 51))
            src = self.rng.uniform(-20, 20, (n, 2))
            solution = solve_pose(WeightedCorrespondences(src, T.apply(src), self.rng.uniform(0.01, 5.0, n)))
            dt, dtheta = pose_error(solution.pose, T)
            self.assertLess(dt, 1e-9)
            self.assertLess(dtheta, 1e-9)
        self.assertLess(time.perf_counter() - started, 1.0)

    def test_weight_scale_invariance(self):
        src = self.rng.normal(size=(8, 2))
        dst = self.rng.normal(size=(8, 2))
        w = self.rng.uniform(0.1, 1.0, 8)
        a = solve_pose(WeightedCorrespondences(src, dst, w)).pose
        b = solve_pose(WeightedCorrespondences(src, dst, 37.5 * w)).pose
        np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-12)

    def test_left_equivariance(self):
        src = self.rng.normal(size=(8, 2))
        dst = self.rng.normal(size=(8, 2))
        w = self.rng.uniform(0.1, 1.0, 8)
        G = random_pose(self.rng)
        base = solve_pose(WeightedCorrespondences(src, dst, w)).pose
        moved = solve_pose(WeightedCorrespondences(G.apply(src), G.apply(dst), w)).pose
        np.testing.assert_allclose(moved.as_matrix(), (G @ base @ G.inverse()).as_matrix(), atol=1e-10)

    def test_reflective_noise_still_gives_a_rotation(self):
        src = self.rng.normal(size=(10, 2))
        dst = src * [1.0, -1.0]
        R = solve_pose(WeightedCorrespondences.uniform(src, dst)).pose.rotation
        self.assertAlmostEqual(np.linalg.det(R), 1.0, places=12)

    def test_zero_weights_have_no_information(self):
        with self.assertRaises(NoInformationError):
            solve_pose(WeightedCorrespondences(np.zeros((3, 2)), np.ones((3, 2)), np.zeros(3)))

    def test_coincident_points_are_degenerate(self):
        with self.assertRaises(DegenerateGeometryError):
            solve_pose(WeightedCorrespondences.uniform(np.ones((4, 2)), np.ones((4, 2))))

    def test_collinear_points_are_flagged(self):
        src = np.column_stack([np.arange(5.0), np.zeros(5)])
        T = Se2.from_xytheta(1.0, -1.0, 0.4)
        solution = solve_pose(WeightedCorrespondences.uniform(src, T.apply(src)))
        self.assertTrue(solution.ill_conditioned)
        np.testing.assert_allclose(solution.pose.as_matrix(), T.as_matrix(), atol=1e-9)


class PoseLossTests(SimpleTestCase):
    def test_zero_at_ground_truth(self):
        T = Se2.from_xytheta(1.0, 2.0, 0.3)
        for alpha in (0.0, 1.0, 10.0):
            self.assertEqual(pose_loss(T, T, alpha).value, 0.0)

    def test_half_turn(self):
        loss = pose_loss(Se2.from_xytheta(0, 0, np.pi), Se2.identity(), alpha=10.0)
        self.assertAlmostEqual(loss.value, 20.0 * np.sqrt(2.0), delta=1e-9)

    def test_three_four_five(self):
        loss = pose_loss(Se2.from_xytheta(3.0, 4.0, 0.7), Se2.from_xytheta(0.0, 0.0, 0.7), alpha=10.0)
        self.assertAlmostEqual(loss.value, 5.0, places=12)

    def test_backward_matches_finite_differences(self):
        est = Se2.from_xytheta(0.4, -0.2, 0.3)
        gt = Se2.from_xytheta(-0.1, 0.5, -0.2)
        g_R, g_t = pose_loss_backward(est, gt, alpha=10.0)

        def as_vector(theta, t):
            return pose_loss(Se2(rot(theta), t), gt, 10.0).value

        numeric_t = numerical_gradient(lambda t: as_vector(est.theta, t), est.translation)
        assert_gradient_close(self, g_t, numeric_t, rtol=1e-6)
        numeric_theta = numerical_gradient(lambda th: as_vector(th[0], est.translation), [est.theta])
        self.assertAlmostEqual(np.sum(g_R * rot_derivative(est.theta)), numeric_theta[0], places=6)


class SolvePoseBackwardTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(31)
        self.src = self.rng.normal(scale=3.0, size=(8, 2))
        self.dst = self.rng.normal(scale=3.0, size=(8, 2))
        self.weights = self.rng.uniform(0.2, 1.0, 8)
        self.gt = Se2.from_xytheta(0.5, -1.0, 0.8)

    def loss(self, src=None, dst=None, weights=None):
        corr = WeightedCorrespondences(
            self.src if src is None else src,
            self.dst if dst is None else dst,
            self.weights if weights is None else weights,
        )
        return pose_loss(solve_pose(corr).pose, self.gt, alpha=10.0).value

    def test_matches_finite_differences(self):
        corr = WeightedCorrespondences(self.src, self.dst, self.weights)
        g_R, g_t = pose_loss_backward(solve_pose(corr).pose, self.gt, alpha=10.0)
        grads = solve_pose_backward(corr, g_R, g_t)
        assert_gradient_close(self, grads.src, numerical_gradient(lambda v: self.loss(src=v), self.src))
        assert_gradient_close(self, grads.dst, numerical_gradient(lambda v: self.loss(dst=v), self.dst))
        assert_gradient_close(self, grads.weights, numerical_gradient(lambda v: self.loss(weights=v), self.weights))

    def test_arbitrary_upstream_on_rotation_and_translation(self):
        corr = WeightedCorrespondences(self.src, self.dst, self.weights)
        g_R = self.rng.normal(size=(2, 2))
        g_t = self.rng.normal(size=2)

        def scalar(src):
            pose = solve_pose(WeightedCorrespondences(src, self.dst, self.weights)).pose
            return np.sum(g_R * pose.rotation) + g_t @ pose.translation

        grads = solve_pose_backward(corr, g_R, g_t)
        assert_gradient_close(self, grads.src, numerical_gradient(scalar, self.src))

    def test_perfect_fit_has_zero_gradient(self):
        corr = WeightedCorrespondences(self.src, self.gt.apply(self.src), self.weights)
        g_R, g_t = pose_loss_backward(solve_pose(corr).pose, self.gt, alpha=10.0)
        grads = solve_pose_backward(corr, g_R, g_t)
        for g in (grads.src, grads.dst, grads.weights):
            self.assertLess(np.linalg.norm(g), 1e-8)

    def test_weight_gradient_is_orthogonal_to_weight_scaling(self):
        corr = WeightedCorrespondences(self.src, self.dst, np.ones(8))
        g_R, g_t = pose_loss_backward(solve_pose(corr).pose, self.gt, alpha=10.0)
        grads = solve_pose_backward(corr, g_R, g_t)
        self.assertAlmostEqual(float(np.sum(grads.weights)), 0.0, places=10)

    def test_ill_conditioned_solve_refuses_gradients(self):
        src = np.column_stack([np.arange(5.0), np.zeros(5)])
        corr = WeightedCorrespondences.uniform(src, src + [1.0, 0.0])
        with self.assertRaises(GradientUnavailableError):
            solve_pose_backward(corr, np.eye(2), np.ones(2))
