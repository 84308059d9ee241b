import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ConfigurationError, DataError
from core.testing import assert_gradient_close, numerical_gradient
from keypoints.services import KeypointSet

from .services import (
    EmbeddingIndex,
    LocationEmbedding,
    PlaceRecognitionOptions,
    calibrate_threshold,
    cosine_similarity,
    embed,
    embed_backward,
    embed_keypoints,
    recall_at_n,
    recall_curve,
    sample_triplets,
    triplet_loss,
    triplet_loss_backward,
)
from .store import read_embeddings, write_embeddings


def brute_force(index_entries, query, n, exclude_trajectory=None):
    scored = []
    q = query.vector / np.linalg.norm(query.vector)
    for e in index_entries:
        if e.scan_id == query.scan_id or (exclude_trajectory is not None and e.trajectory_id == exclude_trajectory):
            continue
        norm = np.linalg.norm(e.vector)
        scored.append((-(e.vector / norm) @ q if norm > 0 else 0.0, e.scan_id))
    return [scan_id for _, scan_id in sorted(scored)[:n]]


class EmbedTests(SimpleTestCase):
    def test_constant_map(self):
        v = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(embed(np.tile(v, (4, 5, 1))).vector, v)

    def test_hot_pixels(self):
        data = np.zeros((6, 6, 2))
        data[1, 4, 0] = 3.0
        data[5, 0, 1] = 7.0
        np.testing.assert_array_equal(embed(data).vector, [3.0, 7.0])

    def test_pixelwise_max_commutes(self):
        rng = np.random.default_rng(40)
        a = rng.normal(size=(5, 5, 4))
        b = rng.normal(size=(5, 5, 4))
        np.testing.assert_array_equal(embed(np.maximum(a, b)).vector, np.maximum(embed(a).vector, embed(b).vector))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(41)
        data = rng.normal(size=(4, 4, 3))
        upstream = rng.normal(size=3)
        numeric = numerical_gradient(lambda d: embed(d).vector @ upstream, data)
        assert_gradient_close(self, embed_backward(data, upstream), numeric, rtol=1e-6)

    def test_keypoint_embedding(self):
        descriptors = np.array([[0.6, 0.8, 0.0], [0.0, -0.6, 0.8]])
        keypoints = KeypointSet(np.zeros((2, 2)), np.ones(2), descriptors, np.zeros(2, dtype=bool))
        np.testing.assert_array_equal(embed_keypoints(keypoints).vector, [0.6, 0.8, 0.8])

    def test_embedding_source_option(self):
        self.assertEqual(PlaceRecognitionOptions().embedding, "dense")
        self.assertEqual(PlaceRecognitionOptions(embedding="keypoints").embedding, "keypoints")
        with self.assertRaises(ConfigurationError):
            PlaceRecognitionOptions(embedding="bag")


class EmbeddingIndexTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(42)

    def test_twin_vector_ranks_first_with_similarity_one(self):
        index = EmbeddingIndex()
        v = self.rng.normal(size=8)
        index.extend([LocationEmbedding(v, 1), LocationEmbedding(self.rng.normal(size=8), 2)])
        [best] = index.query(LocationEmbedding(v, 99), n=1)
        self.assertEqual(best.scan_id, 1)
        self.assertAlmostEqual(best.similarity, 1.0, places=12)

    def test_orthogonal_vectors(self):
        self.assertAlmostEqual(cosine_similarity([1.0, 0.0], [[0.0, 3.0]])[0], 0.0)

    def test_query_never_returns_itself(self):
        index = EmbeddingIndex()
        v = self.rng.normal(size=4)
        index.extend([LocationEmbedding(v, 5), LocationEmbedding(-v, 6)])
        neighbours = index.query(index.get(5), n=5)
        self.assertEqual([nb.scan_id for nb in neighbours], [6])

    def test_ties_break_by_ascending_id(self):
        index = EmbeddingIndex("kdtree")
        v = np.array([1.0, 2.0, 3.0])
        index.extend([LocationEmbedding(v, 9), LocationEmbedding(2 * v, 3), LocationEmbedding(v, 7)])
        neighbours = index.query(LocationEmbedding(v, 100), n=3)
        self.assertEqual([nb.scan_id for nb in neighbours], [3, 7, 9])

    def test_matches_brute_force_on_random_index(self):
        entries = [
            LocationEmbedding(self.rng.normal(size=16), i, trajectory_id=i % 2, position=self.rng.uniform(0, 50, 2))
            for i in range(100)
        ]
        entries[17] = LocationEmbedding(np.zeros(16), 17, 1)
        linear = EmbeddingIndex("linear")
        tree = EmbeddingIndex("kdtree")
        linear.extend(entries)
        tree.extend(entries)
        for query in entries[::7]:
            for n in (1, 5, 30):
                expected = brute_force(entries, query, n)
                self.assertEqual([nb.scan_id for nb in linear.query(query, n)], expected)
                self.assertEqual([nb.scan_id for nb in tree.query(query, n)], expected)
                expected = brute_force(entries, query, n, exclude_trajectory=query.trajectory_id)
                filtered = tree.query(query, n, exclude_trajectory=query.trajectory_id)
                self.assertEqual([nb.scan_id for nb in filtered], expected)

    def test_max_id_filter(self):
        index = EmbeddingIndex("kdtree")
        index.extend(LocationEmbedding(self.rng.normal(size=4), i) for i in range(20))
        neighbours = index.query(index.get(19), n=20, max_id=9)
        self.assertEqual(sorted(nb.scan_id for nb in neighbours), list(range(10)))

    def test_empty_index_and_bad_inputs(self):
        with self.assertRaises(DataError):
            EmbeddingIndex().query(LocationEmbedding(np.ones(3)), 1)
        index = EmbeddingIndex()
        index.add(LocationEmbedding(np.ones(3), 1))
        with self.assertRaises(DataError):
            index.add(LocationEmbedding(np.ones(3), 1))
        with self.assertRaises(DataError):
            index.add(LocationEmbedding(np.ones(4), 2))


class RecallTests(SimpleTestCase):
    def two_loops(self, offset=0.0):
        angles = np.linspace(0, 2 * np.pi, 20, endpoint=False)
        positions = np.column_stack([np.cos(angles), np.sin(angles)]) * 30.0
        embeddings = []
        rng = np.random.default_rng(43)
        signatures = rng.normal(size=(20, 8))
        for trajectory in (0, 1):
            for i in range(20):
                embeddings.append(
                    LocationEmbedding(signatures[i], trajectory * 100 + i, trajectory, positions[i] + trajectory * offset)
                )
        return embeddings

    def test_exact_twins_give_full_recall(self):
        embeddings = self.two_loops()
        index = EmbeddingIndex("kdtree")
        index.extend(embeddings)
        self.assertEqual(recall_at_n(embeddings, index, 1, distance=5.0), 1.0)

    def test_far_away_places_give_zero_recall(self):
        embeddings = self.two_loops(offset=1000.0)
        index = EmbeddingIndex()
        index.extend(embeddings)
        self.assertEqual(recall_at_n(embeddings, index, 3, distance=5.0), 0.0)

    def test_hand_enumerated_recall(self):
        index = EmbeddingIndex()
        index.extend(
            [
                LocationEmbedding([1.0, 0.0], 10, 1, (0.0, 0.0)),
                LocationEmbedding([0.0, 1.0], 11, 1, (50.0, 0.0)),
            ]
        )
        queries = [
            LocationEmbedding([0.9, 0.1], 0, 0, (1.0, 0.0)),  # nearest is 10, 1 m away: hit
            LocationEmbedding([0.9, 0.1], 1, 0, (48.0, 0.0)),  # nearest is 10, 48 m away: miss at N=1, hit at N=2
            LocationEmbedding([0.1, 0.9], 2, 0, (52.0, 0.0)),  # nearest is 11, 2 m away: hit
            LocationEmbedding([0.1, 0.9], 3, 0, (20.0, 0.0)),  # both neighbours further than 5 m
        ]
        self.assertAlmostEqual(recall_at_n(queries, index, 1, distance=5.0), 0.5)
        np.testing.assert_allclose(recall_curve(queries, index, 2, distance=5.0), [0.5, 0.75])

    def test_recall_is_monotone_in_n(self):
        rng = np.random.default_rng(44)
        embeddings = [
            LocationEmbedding(rng.normal(size=6), i, i % 3, rng.uniform(0, 40, 2)) for i in range(60)
        ]
        index = EmbeddingIndex("kdtree")
        index.extend(embeddings)
        curve = recall_curve(embeddings, index, 20, distance=8.0)
        self.assertTrue(np.all(np.diff(curve) >= 0))


class TripletLossTests(SimpleTestCase):
    def test_satisfied_margin(self):
        a = np.zeros(2)
        positives = np.zeros((5, 2))
        negatives = np.tile([1.5, 0.0], (5, 1))
        self.assertEqual(triplet_loss(a, positives, negatives, margin=0.5), 0.0)

    def test_hand_value(self):
        a = np.zeros(1)
        self.assertAlmostEqual(triplet_loss(a, [[1.0], [2.0]], [[2.5], [-4.0]], margin=1.0), 0.5)

    def test_positives_equal_negatives_give_the_margin(self):
        rng = np.random.default_rng(45)
        a = rng.normal(size=3)
        same = a + np.tile([0.3, 0.0, 0.0], (5, 1))
        self.assertAlmostEqual(triplet_loss(a, same, same, margin=0.7), 0.7)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(46)
        a, p, n = rng.normal(size=3), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        self.assertEqual(triplet_loss(a, p, n), triplet_loss(a, p[::-1], n[[2, 0, 4, 1, 3]]))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(47)
        a, p, n = rng.normal(size=4), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        g_a, g_p, g_n = triplet_loss_backward(a, p, n, margin=2.0)
        assert_gradient_close(self, g_a, numerical_gradient(lambda x: triplet_loss(x, p, n, 2.0), a))
        assert_gradient_close(self, g_p, numerical_gradient(lambda x: triplet_loss(a, x, n, 2.0), p))
        assert_gradient_close(self, g_n, numerical_gradient(lambda x: triplet_loss(a, p, x, 2.0), n))

    def test_sampling_respects_radii(self):
        positions = np.column_stack([np.arange(60.0), np.zeros(60)])
        rng = np.random.default_rng(48)
        near, far = sample_triplets(positions, 30, rng)
        self.assertTrue(np.all(np.abs(positions[near, 0] - 30) < 5))
        self.assertNotIn(30, near)
        self.assertTrue(np.all(np.abs(positions[far, 0] - 30) > 25))
        self.assertIsNone(sample_triplets(positions[:10], 0, rng))


class CalibrationTests(SimpleTestCase):
    def test_threshold_sits_above_every_false_positive(self):
        calibration = calibrate_threshold([0.99, 0.97, 0.96, 0.9, 0.8], [True, True, False, True, False])
        self.assertEqual(calibration.threshold, 0.97)
        self.assertEqual(calibration.true_positives, 2)
        self.assertAlmostEqual(calibration.recall, 2 / 3)

    def test_no_false_positives_accepts_everything(self):
        self.assertEqual(calibrate_threshold([0.5, 0.7], [True, True]).threshold, 0.5)

    def test_no_proposals_keeps_fallback(self):
        self.assertEqual(calibrate_threshold([], [], fallback=0.93).threshold, 0.93)


class EmbeddingStoreTests(SimpleTestCase):
    def test_write_then_read(self):
        embeddings = [
            LocationEmbedding([0.5, -0.25, 1.0], 3, 1, (2.0, -4.5)),
            LocationEmbedding([1.5, 0.0, 2.0], 8, 0, (0.0, 1.0)),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "embeddings.bin"
            write_embeddings(path, embeddings)
            loaded = read_embeddings(path)
        self.assertEqual([e.scan_id for e in loaded], [3, 8])
        np.testing.assert_array_equal(loaded[0].vector, [0.5, -0.25, 1.0])
        np.testing.assert_array_equal(loaded[0].position, [2.0, -4.5])

    def test_truncated_file_names_offset(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "embeddings.bin"
            write_embeddings(path, [LocationEmbedding([1.0, 2.0], 1)])
            path.write_bytes(path.read_bytes()[:-3])
            with self.assertRaisesRegex(DataError, "byte offset 24"):
                read_embeddings(path)
