import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ConfigurationError
from core.grids import Grid2, bilinear_sample, l2_normalize
from core.testing import assert_gradient_close, numerical_gradient

from .services import (
    KeypointHeadOutput,
    KeypointOptions,
    cell_partition,
    default_keypoint_count,
    extract_keypoints,
    keypoint_scores,
    keypoint_scores_backward,
    sample_descriptors,
    sample_descriptors_backward,
    soft_locations,
    soft_locations_backward,
)


class CellPartitionTests(SimpleTestCase):
    def test_256_grid_into_256_cells(self):
        cells = cell_partition(256, 256, 256)
        self.assertEqual((cells.cell_size, cells.rows, cells.cols), (16, 16, 16))

    def test_single_cell(self):
        cells = cell_partition(8, 8, 1)
        self.assertEqual(cells.cell_size, 8)
        self.assertEqual(cells.count, 1)

    def test_impossible_count_lists_valid_ones(self):
        with self.assertRaises(ConfigurationError) as ctx:
            cell_partition(10, 10, 3)
        self.assertIn("valid counts are [1, 4, 25, 100]", str(ctx.exception))

    def test_rectangular_grid(self):
        cells = cell_partition(32, 16, 8)
        self.assertEqual((cells.cell_size, cells.rows, cells.cols), (8, 2, 4))

    def test_default_count_density(self):
        self.assertEqual(default_keypoint_count(64, 64), 64)
        self.assertEqual(default_keypoint_count(160, 160), 400)


class SoftLocationTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(10)
        self.cells = cell_partition(8, 8, 4)

    def test_uniform_logits_give_cell_centroids(self):
        locations = soft_locations(np.zeros((8, 8)), self.cells)
        np.testing.assert_allclose(locations, [[1.5, 1.5], [5.5, 1.5], [1.5, 5.5], [5.5, 5.5]], atol=1e-12)

    def test_saturated_logit_picks_the_pixel(self):
        logits = np.zeros((8, 8))
        logits[6, 5] = 50.0
        locations = soft_locations(logits, self.cells)
        np.testing.assert_allclose(locations[3], [5.0, 6.0], atol=1e-9)

    def test_locations_stay_inside_their_cells(self):
        for _ in range(20):
            logits = self.rng.normal(scale=30.0, size=(8, 8))
            locations = soft_locations(logits, self.cells)
            np.testing.assert_array_equal(self.cells.cell_of(locations), np.arange(4))
            lower = self.cells.centres() - 1.5
            self.assertTrue(np.all(locations >= lower) and np.all(locations <= lower + 3.0))

    def test_raising_a_logit_moves_toward_that_pixel(self):
        logits = self.rng.normal(size=(8, 8))
        before = soft_locations(logits, self.cells)[0]
        logits[0, 3] += 0.5
        after = soft_locations(logits, self.cells)[0]
        self.assertGreater(np.dot(after - before, np.array([3.0, 0.0]) - before), 0.0)

    def test_gradient_matches_finite_differences(self):
        logits = self.rng.normal(size=(8, 8))
        upstream = self.rng.normal(size=(4, 2))
        analytic = soft_locations_backward(logits, self.cells, upstream)
        numeric = numerical_gradient(lambda z: np.sum(soft_locations(z, self.cells) * upstream), logits)
        assert_gradient_close(self, analytic, numeric, rtol=1e-5)


class KeypointScoreTests(SimpleTestCase):
    def test_zero_logits_give_one_half(self):
        scores = keypoint_scores(np.zeros((4, 4)), [[0.3, 1.2], [2.0, 2.0]])
        np.testing.assert_allclose(scores, 0.5)

    def test_large_logits_saturate(self):
        scores = keypoint_scores(np.full((4, 4), 20.0), [[1.5, 1.5]])
        self.assertAlmostEqual(scores[0], 1.0, delta=1e-8)

    def test_midpoint_between_two_sigmoid_values(self):
        logits = np.log(np.array([[0.2 / 0.8, 0.4 / 0.6]]))
        scores = keypoint_scores(logits, [[0.5, 0.0]])
        self.assertAlmostEqual(scores[0], 0.3, places=12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(6, 6))
        locations = rng.uniform(0.2, 4.8, (5, 2))
        upstream = rng.normal(size=5)
        grad_logits, grad_locations = keypoint_scores_backward(logits, locations, upstream)
        numeric = numerical_gradient(lambda z: np.dot(keypoint_scores(z, locations), upstream), logits)
        assert_gradient_close(self, grad_logits, numeric, rtol=1e-5)
        numeric = numerical_gradient(lambda p: np.dot(keypoint_scores(logits, p), upstream), locations)
        assert_gradient_close(self, grad_locations, numeric, rtol=1e-5)


class DescriptorSamplingTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(12)

    def test_constant_map(self):
        v = np.array([1.0, -2.0, 2.0])
        descriptors, degenerate = sample_descriptors(np.tile(v, (5, 5, 1)), [[1.3, 2.7], [0.0, 4.0]])
        np.testing.assert_allclose(descriptors, np.tile(v / 3.0, (2, 1)))
        self.assertFalse(degenerate.any())

    def test_integer_location_returns_stored_column(self):
        data = self.rng.normal(size=(5, 5, 4))
        descriptors, _ = sample_descriptors(data, [[3.0, 1.0]])
        np.testing.assert_allclose(descriptors[0], data[1, 3] / np.linalg.norm(data[1, 3]))

    def test_matches_sample_then_normalise(self):
        data = self.rng.normal(size=(7, 7, 6))
        locations = self.rng.uniform(0, 6, (10, 2))
        expected = l2_normalize(bilinear_sample(data, locations).values, axis=1).unit
        np.testing.assert_allclose(sample_descriptors(Grid2(data, 1.0, (0, 0)), locations).unit, expected)

    def test_zero_map_is_degenerate(self):
        descriptors, degenerate = sample_descriptors(np.zeros((3, 3, 2)), [[1.0, 1.0]])
        np.testing.assert_array_equal(descriptors, [[0.0, 0.0]])
        self.assertTrue(degenerate[0])

    def test_gradients_match_finite_differences(self):
        data = self.rng.normal(size=(6, 6, 3))
        locations = self.rng.uniform(0.2, 4.8, (4, 2))
        upstream = self.rng.normal(size=(4, 3))
        grad_map, grad_locations = sample_descriptors_backward(data, locations, upstream)
        numeric = numerical_gradient(lambda d: np.sum(sample_descriptors(d, locations).unit * upstream), data)
        assert_gradient_close(self, grad_map, numeric, rtol=1e-5)
        numeric = numerical_gradient(lambda p: np.sum(sample_descriptors(data, p).unit * upstream), locations)
        assert_gradient_close(self, grad_locations, numeric, rtol=1e-5)


class ExtractKeypointTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(13)
        self.head = KeypointHeadOutput(
            location_logits=Grid2.centred(rng.normal(size=(16, 16)), 0.5),
            score_logits=Grid2.centred(rng.normal(size=(16, 16)), 0.5),
            descriptor_map=Grid2.centred(rng.normal(size=(16, 16, 4)), 0.5),
        )

    def test_full_extraction(self):
        keypoints = extract_keypoints(self.head, KeypointOptions(keypoint_count=16))
        self.assertEqual(len(keypoints), 16)
        self.assertTrue(np.all((keypoints.scores > 0) & (keypoints.scores < 1)))
        np.testing.assert_allclose(np.linalg.norm(keypoints.descriptors, axis=1), 1.0)

    def test_location_head_ablation_uses_cell_centres(self):
        keypoints = extract_keypoints(self.head, KeypointOptions(keypoint_count=4, use_location_head=False))
        np.testing.assert_array_equal(keypoints.locations, [[3.5, 3.5], [11.5, 3.5], [3.5, 11.5], [11.5, 11.5]])

    def test_score_head_ablation_gives_unit_scores(self):
        keypoints = extract_keypoints(self.head, KeypointOptions(keypoint_count=4, use_score_head=False))
        np.testing.assert_array_equal(keypoints.scores, np.ones(4))

    def test_default_budget_follows_grid_area(self):
        keypoints = extract_keypoints(self.head)
        self.assertEqual(len(keypoints), default_keypoint_count(16, 16))
