import os

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ConfigurationError, DataError
from core.geometry import Se2, wrap_angle
from core.grids import Grid2, pix2world, pixel_coordinates
from core.testing import assert_gradient_close, numerical_gradient
from pose_solver.services import WeightedCorrespondences, solve_pose

from .services import (
    MatchOptions,
    MatchSet,
    benchmark_match_points,
    match_points,
    match_points_backward,
    softmax_temperature_sweep,
    temperature_softmax,
)

BUDGET_MS = 35.0


def unique_descriptor_map(size=16, channels=8, target=(5, 9), seed=0):
    """Random map in channels 1.. with a single pixel holding the first basis vector."""
    rng = np.random.default_rng(seed)
    data = np.zeros((size, size, channels))
    data[:, :, 1:] = rng.normal(size=(size, size, channels - 1))
    x, y = target
    data[y, x] = 0.0
    data[y, x, 0] = 1.0
    return data


class MatchPointsTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(20)

    def test_unique_sharp_descriptor_is_found(self):
        data = unique_descriptor_map()
        ones = np.ones((16, 16))
        result = match_points([[5.0, 9.0]], data, data, ones, ones, temperature=100.0)
        np.testing.assert_allclose(result.dst_locations[0], [5.0, 9.0], atol=0.1)
        self.assertAlmostEqual(result.weights[0], 1.0, places=9)

    def test_zero_scores_give_zero_weights(self):
        src = self.rng.normal(size=(8, 8, 4))
        dst = self.rng.normal(size=(8, 8, 4))
        zeros = np.zeros((8, 8))
        result = match_points(self.rng.uniform(0, 7, (10, 2)), src, dst, zeros, zeros, temperature=50.0)
        np.testing.assert_array_equal(result.weights, np.zeros(10))

    def test_identical_descriptors_with_unit_scores_weigh_one(self):
        data = np.tile(np.array([0.0, 3.0, 4.0]), (6, 6, 1))
        ones = np.ones((6, 6))
        result = match_points([[1.0, 2.0], [4.5, 0.5]], data, data, ones, ones, temperature=10.0)
        np.testing.assert_allclose(result.weights, [1.0, 1.0], atol=1e-12)

    def test_weights_stay_in_unit_interval(self):
        for _ in range(5):
            src = self.rng.normal(size=(8, 8, 4))
            dst = self.rng.normal(size=(8, 8, 4))
            result = match_points(
                self.rng.uniform(0, 7, (20, 2)),
                src,
                dst,
                self.rng.uniform(size=(8, 8)),
                self.rng.uniform(size=(8, 8)),
                temperature=self.rng.uniform(1, 100),
            )
            self.assertTrue(np.all((result.weights >= 0.0) & (result.weights <= 1.0)))

    def test_degenerate_source_descriptor_gets_zero_weight(self):
        src = np.zeros((6, 6, 3))
        src[:, :3] = self.rng.normal(size=(6, 3, 3))
        dst = self.rng.normal(size=(6, 6, 3))
        ones = np.ones((6, 6))
        result = match_points([[1.0, 1.0], [4.0, 4.0]], src, dst, ones, ones, temperature=20.0)
        self.assertGreater(result.weights[0], 0.0)
        self.assertEqual(result.weights[1], 0.0)
        np.testing.assert_array_equal(result.src_degenerate, [False, True])

    def test_translation_equivariance(self):
        data = unique_descriptor_map(size=16, target=(6, 7), seed=3)
        shifted = np.roll(data, shift=(2, 3), axis=(0, 1))
        ones = np.ones((16, 16))
        before = match_points([[6.0, 7.0]], data, data, ones, ones, temperature=100.0)
        after = match_points([[6.0, 7.0]], data, shifted, ones, ones, temperature=100.0)
        np.testing.assert_allclose(after.dst_locations - before.dst_locations, [[3.0, 2.0]], atol=1e-6)
        np.testing.assert_allclose(after.weights, before.weights, atol=1e-9)

    def test_block_size_does_not_change_the_result(self):
        src = self.rng.normal(size=(8, 8, 4))
        dst = self.rng.normal(size=(8, 8, 4))
        scores = self.rng.uniform(size=(8, 8))
        locations = self.rng.uniform(0, 7, (13, 2))
        one = match_points(locations, src, dst, scores, scores, 30.0, block_size=1)
        all_at_once = match_points(locations, src, dst, scores, scores, 30.0, block_size=64)
        np.testing.assert_allclose(one.dst_locations, all_at_once.dst_locations, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(one.weights, all_at_once.weights, rtol=1e-12, atol=1e-12)

    def test_accepts_grids_and_checks_channels(self):
        grid = Grid2.centred(self.rng.normal(size=(4, 4, 2)), 0.5)
        scores = Grid2.centred(np.ones((4, 4)), 0.5)
        result = match_points([[1.0, 1.0]], grid, grid, scores, scores, 10.0)
        self.assertEqual(result.dst_locations.shape, (1, 2))
        with self.assertRaises(DataError):
            match_points([[1.0, 1.0]], grid, np.zeros((4, 4, 3)), scores, scores, 10.0)

    def test_float32_agrees_with_float64(self):
        src = self.rng.normal(size=(48, 40, 8))
        dst = self.rng.normal(size=(48, 40, 8))
        scores = self.rng.uniform(size=(48, 40))
        locations = self.rng.uniform(0, 39, (50, 2))
        exact = match_points(locations, src, dst, scores, scores, 50.0, block_size=16, precision="float64")
        fast = match_points(locations, src, dst, scores, scores, 50.0, block_size=16, precision="float32")
        np.testing.assert_allclose(fast.dst_locations, exact.dst_locations, atol=1e-3)
        np.testing.assert_allclose(fast.weights, exact.weights, atol=1e-4)

    def test_tiles_cover_maps_wider_than_one_tile(self):
        # 80 x 60 = 4800 pixels spans two column tiles, the second one partial
        src = self.rng.normal(size=(60, 80, 4))
        dst = self.rng.normal(size=(60, 80, 4))
        locations = self.rng.uniform(0, 59, (5, 2))
        result = match_points(locations, src, dst, np.ones((60, 80)), np.ones((60, 80)), 20.0)
        unit = dst.reshape(-1, 4) / np.linalg.norm(dst.reshape(-1, 4), axis=1, keepdims=True)
        coords = pixel_coordinates(60, 80)
        for descriptor, found in zip(result.src_descriptors, result.dst_locations):
            expected = temperature_softmax(unit @ descriptor, 20.0) @ coords
            np.testing.assert_allclose(found, expected, atol=1e-9)

    def test_underflowing_rows_are_recomputed(self):
        # every destination descriptor is at least 60 degrees from the source one, so at
        # temperature 1000 the shifted mass exp(1000 * (cos - 1)) underflows float32
        angles = self.rng.uniform(np.pi / 3, 2 * np.pi / 3, (6, 6))
        dst = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        src = np.tile(np.array([1.0, 0.0]), (6, 6, 1))
        expected = temperature_softmax(dst.reshape(-1, 2) @ [1.0, 0.0], 1000.0) @ pixel_coordinates(6, 6)
        for precision in ("float32", "float64"):
            with self.subTest(precision=precision):
                result = match_points([[2.0, 3.0]], src, dst, np.ones((6, 6)), np.ones((6, 6)), 1000.0,
                                      precision=precision)
                self.assertTrue(np.all(np.isfinite(result.dst_locations)))
                np.testing.assert_allclose(result.dst_locations[0], expected, atol=1e-9)

    def test_rejects_unknown_precision(self):
        with self.assertRaises(ConfigurationError):
            match_points([[1.0, 1.0]], np.ones((4, 4, 2)), np.ones((4, 4, 2)), np.ones((4, 4)),
                         np.ones((4, 4)), 10.0, precision="float16")
        with self.assertRaises(ConfigurationError):
            MatchOptions(precision="half")


def world_field(points, centres, codes, length=2.5):
    """Smooth descriptor field fixed in the world: Gaussian bumps carrying random codes."""
    d2 = ((points[:, None, :] - centres[None]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2 * length**2)) @ codes


class RotationSweepTests(SimpleTestCase):
    def test_pose_recovered_at_any_rotation(self):
        rng = np.random.default_rng(31)
        centres = rng.uniform(-40.0, 40.0, (400, 2))
        codes = rng.normal(size=(400, 16))
        size = 48
        grid = Grid2.centred(np.zeros((size, size)), 1.0)
        pixels = grid.pixel_coordinates()
        sensor = pix2world(pixels, grid)

        def descriptor_map(pose):
            return world_field(pose.apply(sensor), centres, codes).reshape(size, size, -1)

        keypoints = pixels[np.linalg.norm(sensor, axis=1) <= 15.0][::3]
        ones = np.ones((size, size))
        src_map = descriptor_map(Se2.identity())
        for degrees in (0, 45, 90, 135, 180, -100):
            dst_pose = Se2.from_xytheta(1.0, -0.5, np.radians(degrees))
            match = match_points(keypoints, src_map, descriptor_map(dst_pose), ones, ones, temperature=30.0)
            corr = WeightedCorrespondences(
                pix2world(keypoints, grid), pix2world(match.dst_locations, grid), match.weights
            )
            estimate = solve_pose(corr).pose
            expected = dst_pose.inverse()
            with self.subTest(degrees=degrees):
                self.assertLess(np.degrees(abs(wrap_angle(estimate.theta - expected.theta))), 2.0)
                self.assertLess(np.linalg.norm(estimate.translation - expected.translation), 0.5)


class MatchGradientTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(21)
        self.src_locations = rng.uniform(0.3, 4.7, (3, 2))
        self.src_map = rng.normal(size=(6, 6, 3))
        self.dst_map = rng.normal(size=(6, 6, 3))
        self.src_scores = rng.uniform(0.2, 0.9, (6, 6))
        self.dst_scores = rng.uniform(0.2, 0.9, (6, 6))
        self.temperature = 4.0
        self.grad_locations = rng.normal(size=(3, 2))
        self.grad_weights = rng.normal(size=3)

    def loss(self, src_locations=None, src_map=None, dst_map=None, src_scores=None, dst_scores=None):
        result = match_points(
            self.src_locations if src_locations is None else src_locations,
            self.src_map if src_map is None else src_map,
            self.dst_map if dst_map is None else dst_map,
            self.src_scores if src_scores is None else src_scores,
            self.dst_scores if dst_scores is None else dst_scores,
            self.temperature,
            block_size=2,
        )
        return np.sum(result.dst_locations * self.grad_locations) + np.dot(result.weights, self.grad_weights)

    def test_gradients_match_finite_differences(self):
        grads = match_points_backward(
            self.src_locations,
            self.src_map,
            self.dst_map,
            self.src_scores,
            self.dst_scores,
            self.temperature,
            self.grad_locations,
            self.grad_weights,
            block_size=2,
        )
        checks = [
            ("src_locations", self.src_locations),
            ("src_map", self.src_map),
            ("dst_map", self.dst_map),
            ("src_scores", self.src_scores),
            ("dst_scores", self.dst_scores),
        ]
        analytic = {
            "src_locations": grads.src_locations,
            "src_map": grads.src_descriptor_map,
            "dst_map": grads.dst_descriptor_map,
            "src_scores": grads.src_score_map,
            "dst_scores": grads.dst_score_map,
        }
        for name, value in checks:
            with self.subTest(input=name):
                numeric = numerical_gradient(lambda v: self.loss(**{name: v}), value)
                assert_gradient_close(self, analytic[name], numeric, rtol=1e-4)


class TemperatureSoftmaxTests(SimpleTestCase):
    def test_constant_map_is_uniform(self):
        [(_, S, argmax)] = softmax_temperature_sweep(np.full((4, 6), 0.3), [50.0])
        np.testing.assert_allclose(S, np.full((4, 6), 1 / 24))
        np.testing.assert_allclose(argmax, [2.5, 1.5])

    def test_small_temperature_limit_is_uniform(self):
        rng = np.random.default_rng(22)
        C = rng.uniform(-1, 1, (5, 5))
        [(_, S, _)] = softmax_temperature_sweep(C, [1e-12])
        np.testing.assert_allclose(S, np.full((5, 5), 1 / 25), atol=1e-9)

    def test_two_point_closed_form(self):
        S = temperature_softmax(np.array([1.0, 0.0]), np.log(9.0))
        np.testing.assert_allclose(S, [0.9, 0.1], atol=1e-12)

    def test_mass_sums_to_one(self):
        rng = np.random.default_rng(23)
        S = temperature_softmax(rng.uniform(-1, 1, (7, 100)), 80.0)
        np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-12)

    def test_soft_argmax_converges_toward_argmax(self):
        coords = pixel_coordinates(8, 8)
        C = (1.0 - coords.sum(axis=1) / 14.0).reshape(8, 8)
        target = coords[np.argmax(C)]
        sweep = softmax_temperature_sweep(C, [0.1, 1.0, 5.0, 20.0, 100.0, 1000.0])
        distances = [np.linalg.norm(argmax - target) for _, _, argmax in sweep]
        self.assertTrue(all(b <= a + 1e-12 for a, b in zip(distances, distances[1:])))
        self.assertLess(distances[-1], 1e-6)

    def test_rejects_non_positive_temperature(self):
        with self.assertRaises(ConfigurationError):
            temperature_softmax(np.zeros(3), 0.0)
        with self.assertRaises(ConfigurationError):
            MatchOptions(temperature=-1.0)


class MatchSetTests(SimpleTestCase):
    def test_validates_lengths_and_weights(self):
        with self.assertRaises(DataError):
            MatchSet(np.zeros((2, 2)), np.zeros((3, 2)), np.ones(2), 50.0)
        with self.assertRaises(DataError):
            MatchSet(np.zeros((2, 2)), np.zeros((2, 2)), [0.5, 1.5], 50.0)
        self.assertEqual(MatchSet(np.zeros((2, 2)), np.ones((2, 2)), [0.5, 0.25], 50.0).total_weight, 0.75)


class MatchBenchmarkTests(SimpleTestCase):
    """400 keypoints against a 256x256x16 map within 35 ms.

    The timing always runs. Outside RKS_BENCHMARK=1 a miss is reported as a skip with
    the measured time, since shared test machines are not timing references.
    """

    def test_400_keypoints_on_256_grid(self):
        timings = benchmark_match_points(keypoints=400, size=256, channels=16, repeats=5)
        best = timings["best"] * 1e3
        if os.environ.get("RKS_BENCHMARK") == "1":
            self.assertLess(best, BUDGET_MS, f"best {best:.1f} ms")
        elif best >= BUDGET_MS:
            self.skipTest(f"best {best:.1f} ms exceeds {BUDGET_MS:.0f} ms; set RKS_BENCHMARK=1 to enforce")
