import os
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from core.exceptions import ConfigurationError, DataError, TrainingAbortedError
from core.geometry import Se2
from core.grids import Grid2, pix2world
from core.testing import assert_gradient_close, numerical_gradient
from keypoints.services import KeypointOptions
from pose_solver.services import WeightedCorrespondences, solve_pose

from .checkpoint import HEADER, load_checkpoint, save_checkpoint
from .network import FeatureNet, avg_pool, backward, forward, upsample
from .services import (
    TrainConfig,
    Trainer,
    TrainingPair,
    augment,
    finetune_step,
    pose_chain,
    rotate_scan,
)
from .optim import Adam
from .signals import train_step_finished

SLOW = os.environ.get("RKS_SLOW_TESTS") == "1"

LANDMARKS = np.array([[-9.0, -6.0], [-4.0, 7.5], [2.5, -8.0], [7.0, 3.0], [-1.0, 1.5], [9.0, -2.0], [-7.5, 0.5]])


def blob_scan(pose, size, resolution=1.0, sigma=1.2, landmarks=LANDMARKS):
    """Gaussian blobs at `landmarks` seen from a sensor at `pose`."""
    grid = Grid2.centred(np.zeros((size, size)), resolution)
    local = pose.inverse().apply(landmarks)
    q = pix2world(grid.pixel_coordinates(), grid)
    d2 = ((q[:, None, :] - local[None, :, :]) ** 2).sum(axis=2)
    return grid.with_data(np.exp(-d2 / (2 * sigma**2)).sum(axis=1).reshape(size, size))


def blob_pair(size, dst_pose, resolution=1.0):
    return TrainingPair(blob_scan(Se2.identity(), size, resolution), blob_scan(dst_pose, size, resolution), dst_pose)


def small_config(**overrides):
    values = dict(
        learning_rate=1e-2,
        steps=200,
        augmentation_range=0.0,
        temperature=10.0,
        keypoints=KeypointOptions(keypoint_count=16),
        seed=3,
    )
    values.update(overrides)
    return TrainConfig(**values)


class NetworkTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_zero_parameters_give_half_scores(self):
        head, _ = forward(FeatureNet(), self.rng.uniform(size=(16, 16)))
        np.testing.assert_array_equal(head.score_map, np.full((16, 16), 0.5))

    def test_forward_is_deterministic(self):
        scan = self.rng.uniform(size=(16, 16))
        a, _ = forward(FeatureNet.initialised(5), scan)
        b, _ = forward(FeatureNet.initialised(5), scan)
        np.testing.assert_array_equal(a.descriptor_map.data, b.descriptor_map.data)
        np.testing.assert_array_equal(a.location_logits.data, b.location_logits.data)

    def test_output_shapes_follow_input(self):
        net = FeatureNet.initialised(0)
        head, _ = forward(net, Grid2.centred(self.rng.uniform(size=(12, 20)), 0.7))
        self.assertEqual(head.location_logits.data.shape, (12, 20, 1))
        self.assertEqual(head.descriptor_map.data.shape, (12, 20, net.descriptor_channels))
        self.assertEqual(head.descriptor_map.resolution, 0.7)

    def test_size_must_survive_pooling(self):
        with self.assertRaises(DataError):
            forward(FeatureNet(), np.zeros((10, 16)))

    def test_parameter_count_is_stable(self):
        self.assertEqual(FeatureNet().parameter_count, FeatureNet.initialised(9).parameter_count)
        self.assertEqual(FeatureNet().descriptor_channels, 16)

    def test_pool_and_upsample_preserve_constants(self):
        x = np.full((8, 8, 2), 3.0)
        np.testing.assert_allclose(avg_pool(x), np.full((4, 4, 2), 3.0))
        np.testing.assert_allclose(upsample(avg_pool(x)), x)

    def test_parameter_gradient_matches_finite_differences(self):
        net = FeatureNet.initialised(1)
        scan = self.rng.uniform(size=(16, 16))
        A = self.rng.normal(size=(16, 16))
        B = self.rng.normal(size=(16, 16))
        C = self.rng.normal(size=(16, 16, net.descriptor_channels))

        def objective(params):
            head, _ = forward(FeatureNet(net.encoder_channels, net.decoder_channels, params), scan)
            return (
                np.sum(A * head.location_logits.plane)
                + np.sum(B * head.score_logits.plane)
                + np.sum(C * head.descriptor_map.data)
            )

        _, cache = forward(net, scan)
        analytic = backward(net, cache, A, B, C)
        for name in net.layout:
            span = net.layer_slice(name)
            indices = self.rng.choice(np.arange(span.start, span.stop), min(20, span.stop - span.start), replace=False)
            numeric = numerical_gradient(objective, net.params, indices=indices)
            with self.subTest(layer=name):
                assert_gradient_close(self, analytic[indices], numeric)


class AugmentTests(SimpleTestCase):
    def test_zero_angle_is_identity(self):
        pair = blob_pair(16, Se2.from_xytheta(1.0, 0.0, 0.1))
        self.assertIs(augment(pair, 0.0), pair)

    def test_quarter_turn_moves_bright_pixel(self):
        data = np.zeros((9, 9))
        data[4, 6] = 1.0  # world (2, 0)
        rotated = rotate_scan(Grid2.centred(data, 1.0), np.pi / 2)
        row, col = np.unravel_index(np.argmax(rotated.plane), rotated.plane.shape)
        self.assertEqual((row, col), (6, 4))  # world (0, 2)
        self.assertAlmostEqual(rotated.plane[6, 4], 1.0, places=9)

    def test_outside_source_is_zero_filled(self):
        rotated = rotate_scan(Grid2.centred(np.ones((8, 8)), 1.0), np.pi / 4)
        self.assertEqual(rotated.plane[0, 0], 0.0)
        self.assertAlmostEqual(rotated.plane[4, 4], 1.0)

    def test_angle_out_of_range(self):
        with self.assertRaises(DataError):
            augment(blob_pair(16, Se2.identity()), 4.0)

    def test_augmented_ground_truth_matches_rotated_points(self):
        rng = np.random.default_rng(4)
        relative = Se2.from_xytheta(1.5, -0.5, 0.2)
        pair = blob_pair(16, relative)
        src = rng.uniform(-6, 6, size=(12, 2))
        dst = relative.inverse().apply(src)
        for angle in (0.3, -1.2, np.pi / 2, np.pi):
            augmented = augment(pair, angle)
            turn = Se2.from_xytheta(0.0, 0.0, angle)
            solution = solve_pose(WeightedCorrespondences.uniform(src, turn.apply(dst)))
            with self.subTest(angle=angle):
                np.testing.assert_allclose(
                    solution.pose.as_matrix(), augmented.relative.inverse().as_matrix(), atol=1e-9
                )


class PoseChainTests(SimpleTestCase):
    def test_identical_scans_with_identity_target_are_well_posed(self):
        pair = blob_pair(16, Se2.identity())
        cfg = small_config()
        result = pose_chain(cfg.build_network(), pair, cfg)
        self.assertFalse(result.skipped)
        self.assertTrue(np.isfinite(result.loss))
        self.assertTrue(np.all(np.isfinite(result.grad)))

    def test_chain_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        pair = blob_pair(16, Se2.from_xytheta(0.8, -0.4, 0.15))
        cfg = small_config()
        net = cfg.build_network()
        result = pose_chain(net, pair, cfg)
        self.assertFalse(result.skipped)

        def objective(params):
            perturbed = FeatureNet(net.encoder_channels, net.decoder_channels, params)
            return pose_chain(perturbed, pair, cfg, need_grad=False).loss

        for name in net.layout:
            span = net.layer_slice(name)
            indices = rng.choice(np.arange(span.start, span.stop), min(20, span.stop - span.start), replace=False)
            numeric = numerical_gradient(objective, net.params, indices=indices)
            with self.subTest(layer=name):
                assert_gradient_close(self, result.grad[indices], numeric)

    def test_head_ablations_still_train(self):
        pair = blob_pair(16, Se2.from_xytheta(0.5, 0.0, 0.05))
        for options in (KeypointOptions(16, False, True), KeypointOptions(16, True, False)):
            cfg = small_config(keypoints=options)
            result = pose_chain(cfg.build_network(), pair, cfg)
            with self.subTest(options=options):
                self.assertFalse(result.skipped)
                self.assertTrue(np.all(np.isfinite(result.grad)))

    def test_zero_network_is_skipped(self):
        pair = blob_pair(16, Se2.identity())
        result = pose_chain(FeatureNet(), pair, small_config())
        self.assertTrue(result.skipped)
        self.assertEqual(result.weight_sum, 0.0)


class TrainingTests(SimpleTestCase):
    def test_loss_halves_on_a_fixed_pair(self):
        pair = blob_pair(32, Se2.from_xytheta(1.5, -1.0, 0.1))
        cfg = small_config()
        trainer = Trainer(cfg.build_network(), cfg)
        initial = pose_chain(trainer.net, pair, cfg, need_grad=False).loss
        trainer.run([pair], np.random.default_rng(0))
        final = pose_chain(trainer.net, pair, cfg, need_grad=False).loss
        self.assertLessEqual(final, 0.5 * initial)

    def test_loss_curve_is_reproducible(self):
        pair = blob_pair(16, Se2.from_xytheta(0.5, 0.5, -0.1))
        cfg = small_config(steps=10, augmentation_range=np.pi)
        curves = []
        for _ in range(2):
            trainer = Trainer(cfg.build_network(), cfg)
            curves.append(trainer.run([pair], np.random.default_rng(2)))
        np.testing.assert_array_equal(curves[0], curves[1])

    def test_repeated_degenerate_steps_abort(self):
        pair = blob_pair(16, Se2.identity())
        trainer = Trainer(FeatureNet(), small_config(max_consecutive_skips=3))
        trainer.step([pair])
        trainer.step([pair])
        with self.assertRaises(TrainingAbortedError):
            trainer.step([pair])

    def test_step_signal_carries_loss(self):
        received = []

        def receiver(sender, **kwargs):
            received.append(kwargs)

        train_step_finished.connect(receiver)
        try:
            cfg = small_config()
            Trainer(cfg.build_network(), cfg).step([blob_pair(16, Se2.from_xytheta(0.5, 0.0, 0.0))])
        finally:
            train_step_finished.disconnect(receiver)
        self.assertEqual(len(received), 1)
        self.assertEqual(received[0]["step"], 0)
        self.assertFalse(received[0]["skipped"])
        self.assertEqual(received[0]["phase"], "odometry")
        self.assertTrue(np.isfinite(received[0]["loss"]))

    def test_unsupervised_rotation_range_converges(self):
        if not SLOW:
            self.skipTest("set RKS_SLOW_TESTS=1 to run the augmentation sweep")
        for limit in (np.pi / 4, np.pi / 2, np.pi):
            cfg = small_config(augmentation_range=limit, steps=400)
            pair = blob_pair(32, Se2.from_xytheta(1.0, -0.5, 0.1))
            trainer = Trainer(cfg.build_network(), cfg)
            losses = trainer.run([pair], np.random.default_rng(5))
            with self.subTest(limit=limit):
                self.assertLess(np.nanmean(losses[-50:]), np.nanmean(losses[:50]))


class FinetuneTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(8)
        self.positions = np.stack([np.arange(80) * 0.5, np.zeros(80)], axis=1)
        self.scans = [Grid2.centred(rng.uniform(size=(16, 16)), 1.0) for _ in range(80)]

    def test_triplet_step_updates_parameters(self):
        cfg = small_config()
        net = cfg.build_network()
        before = net.params.copy()
        optimiser = Adam(net.parameter_count, cfg.learning_rate)
        loss = finetune_step(net, optimiser, self.scans, self.positions, 0, np.random.default_rng(1), cfg)
        self.assertTrue(np.isfinite(loss))
        if loss > 0:
            self.assertFalse(np.array_equal(before, net.params))

    def test_no_triplet_available(self):
        cfg = small_config(negative_radius=1000.0)
        net = cfg.build_network()
        optimiser = Adam(net.parameter_count)
        self.assertIsNone(finetune_step(net, optimiser, self.scans, self.positions, 0, np.random.default_rng(1), cfg))


class TrainConfigTests(SimpleTestCase):
    def test_from_pipeline_defaults(self):
        cfg = TrainConfig.from_config(settings.RKS_PIPELINE, seed=12)
        self.assertEqual(cfg.learning_rate, 1e-3)
        self.assertEqual(cfg.encoder_channels, (4, 4, 8))
        self.assertEqual(cfg.temperature, 50.0)
        self.assertEqual(cfg.seed, 12)

    def test_rejects_bad_values(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig(learning_rate=0.0)
        with self.assertRaises(ConfigurationError):
            replace(TrainConfig(), augmentation_range=4.0)


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "model.rkc"
        self.net = FeatureNet.initialised(2)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        save_checkpoint(self.path, self.net, "0123456789abcdef")
        loaded, stored = load_checkpoint(self.path, expected_hash="0123456789abcdef")
        self.assertEqual(stored, "0123456789abcdef")
        np.testing.assert_array_equal(loaded.params, self.net.params)
        self.assertEqual(loaded.encoder_channels, self.net.encoder_channels)

    def test_hash_mismatch_is_refused(self):
        save_checkpoint(self.path, self.net, "0123456789abcdef")
        with self.assertRaises(ConfigurationError):
            load_checkpoint(self.path, expected_hash="fedcba9876543210")

    def test_truncated_payload_reports_offset(self):
        save_checkpoint(self.path, self.net, "0123456789abcdef")
        raw = self.path.read_bytes()
        self.path.write_bytes(raw[: HEADER.itemsize + 20])
        with self.assertRaises(DataError) as ctx:
            load_checkpoint(self.path)
        self.assertIn(f"byte offset {HEADER.itemsize + 20}", str(ctx.exception))

    def test_bad_magic(self):
        self.path.write_bytes(b"\x00" * 100)
        with self.assertRaises(DataError) as ctx:
            load_checkpoint(self.path)
        self.assertIn("byte offset 0", str(ctx.exception))
