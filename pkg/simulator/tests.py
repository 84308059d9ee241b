import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ConfigurationError, DataError, NoInformationError
from core.geometry import Se2
from core.grids import world2pix
from pose_solver.services import solve_pose

from .services import (
    SimulatorOptions,
    Trajectory,
    clean_polar,
    generate_trajectory,
    landmark_mask,
    make_dataset,
    oracle_correspondences,
    render_polar,
    render_scan,
)
from .store import SCAN_HEADER, read_dataset, read_scan, read_trajectory, write_dataset, write_scan, write_trajectory
from .world import Mover, World, generate_world, load_world, save_world

QUIET = SimulatorOptions().noiseless()


class TrajectoryTests(SimpleTestCase):
    def test_straight_line(self):
        trajectory = generate_trajectory("straight", 100.0, 1.0)
        self.assertEqual(len(trajectory), 101)
        np.testing.assert_allclose(trajectory.positions[:, 0], np.arange(101.0))
        np.testing.assert_array_equal(trajectory.poses[:, 1:], 0.0)

    def test_loop_returns_to_start(self):
        trajectory = generate_trajectory("loop", 160.0, 2.0)
        self.assertLess(np.linalg.norm(trajectory.positions[-1] - trajectory.positions[0]), 1.0)

    def test_figure_eight_returns_to_start(self):
        trajectory = generate_trajectory("figure-eight", 120.0, 1.5)
        self.assertLess(np.linalg.norm(trajectory.positions[-1] - trajectory.positions[0]), 1.0)
        self.assertGreater(trajectory.positions[:, 1].max(), 5.0)
        self.assertLess(trajectory.positions[:, 1].min(), -5.0)

    def test_relative_poses_recompose(self):
        trajectory = generate_trajectory("figure-eight", 120.0, 1.5)
        rebuilt = Trajectory.from_relative(trajectory[0], trajectory.relative_poses(), trajectory.timestamps)
        np.testing.assert_allclose(rebuilt.positions, trajectory.positions, atol=1e-9)

    def test_two_laps_revisit(self):
        trajectory = generate_trajectory("loop", 100.0, 2.0, laps=2)
        self.assertEqual(len(trajectory), 101)
        np.testing.assert_allclose(trajectory.positions[25], trajectory.positions[75], atol=1e-9)

    def test_lateral_offset_moves_left(self):
        trajectory = generate_trajectory("straight", 10.0, 1.0, lateral_offset=1.0)
        np.testing.assert_allclose(trajectory.positions[:, 1], 1.0)

    def test_timestamps_and_speed(self):
        trajectory = generate_trajectory("loop", 160.0, 2.0, speed=10.0)
        self.assertTrue(np.all(np.diff(trajectory.timestamps) > 0))
        with self.assertRaises(DataError):
            Trajectory([0.0, 0.1], [[0, 0, 0], [10, 0, 0]], max_speed=40.0)
        with self.assertRaises(DataError):
            Trajectory([0.0, 0.0], [[0, 0, 0], [1, 0, 0]])

    def test_invalid_requests(self):
        with self.assertRaises(ConfigurationError):
            generate_trajectory("spiral", 10.0, 1.0)
        with self.assertRaises(ConfigurationError):
            generate_trajectory("straight", 0.5, 1.0)


class RenderTests(SimpleTestCase):
    def test_empty_world_is_pure_speckle(self):
        options = replace(QUIET, speckle_mean=0.05, speckle_variance=0.0025)
        polar = render_polar(World(80.0), Se2.identity(), options, seed=3)
        n = polar.size
        self.assertLess(abs(polar.mean() - 0.05), 3 * np.sqrt(0.0025 / n))
        # exponential speckle: the sample variance has standard deviation var * sqrt(8 / n)
        self.assertLess(abs(polar.var() - 0.0025), 3 * 0.0025 * np.sqrt(8 / n))
        scan = render_scan(World(80.0), Se2.identity(), options, seed=3)
        self.assertAlmostEqual(scan.plane.mean(), 0.05, delta=0.005)

    def test_single_reflector_peak(self):
        world = World(80.0, reflectors=[[12.0, 5.0]])
        scan = render_scan(world, Se2.identity(), QUIET, seed=0)
        row, col = np.unravel_index(np.argmax(scan.plane), scan.plane.shape)
        expected = world2pix([12.0, 5.0], scan)
        self.assertLessEqual(np.hypot(col - expected[0], row - expected[1]), 1.0)

    def test_reflector_seen_from_a_moved_sensor(self):
        world = World(80.0, reflectors=[[12.0, 5.0]])
        pose = Se2.from_xytheta(4.0, -2.0, 0.7)
        scan = render_scan(world, pose, QUIET, seed=0)
        row, col = np.unravel_index(np.argmax(scan.plane), scan.plane.shape)
        expected = world2pix(pose.inverse().apply([12.0, 5.0]), scan)
        self.assertLessEqual(np.hypot(col - expected[0], row - expected[1]), 1.0)

    def test_wall_range_within_one_bin(self):
        world = World(80.0, walls=[[10.0, -50.0, 10.0, 50.0]])
        polar = clean_polar(world, Se2.identity(), QUIET)
        for row in (0, 10, 350):
            bearing = row * QUIET.azimuth_step
            true_range = 10.0 / np.cos(bearing)
            peak = np.argmax(polar[row])
            with self.subTest(row=row):
                self.assertLessEqual(abs(peak - (true_range / QUIET.range_step - 0.5)), 1.0)
        self.assertEqual(polar[180].max(), 0.0)

    def test_walls_occlude_reflectors(self):
        world = World(80.0, walls=[[5.0, -1.0, 5.0, 1.0]], reflectors=[[10.0, 0.0]])
        polar = clean_polar(world, Se2.identity(), QUIET)
        self.assertEqual(polar[0, int(10.0 / QUIET.range_step)], 0.0)

    def test_same_seed_and_pose_is_bitwise_identical(self):
        world = generate_world(SimulatorOptions(), 4)
        pose = Se2.from_xytheta(1.0, 2.0, 0.3)
        a = render_scan(world, pose, SimulatorOptions(), seed=9)
        b = render_scan(world, pose, SimulatorOptions(), seed=9)
        c = render_scan(world, pose, SimulatorOptions(), seed=10)
        np.testing.assert_array_equal(a.data, b.data)
        self.assertFalse(np.array_equal(a.data, c.data))

    def test_values_are_power_normalised(self):
        world = generate_world(SimulatorOptions(), 4)
        scan = render_scan(world, Se2.identity(), SimulatorOptions(), seed=1)
        self.assertGreaterEqual(scan.plane.min(), 0.0)
        self.assertLessEqual(scan.plane.max(), 1.0)

    def test_pose_outside_world(self):
        with self.assertRaises(DataError):
            render_scan(World(10.0), Se2.from_xytheta(11.0, 0.0, 0.0), QUIET, seed=0)

    def test_resolution_must_be_configured(self):
        with self.assertRaises(ConfigurationError):
            SimulatorOptions(resolution=0.5)
        self.assertEqual(SimulatorOptions(resolution=0.35).resolution, 0.35)


class NoiseSourceTests(SimpleTestCase):
    def setUp(self):
        self.world = World(80.0, walls=[[10.0, -50.0, 10.0, 50.0]], reflectors=[[4.0, 3.0], [-6.0, 2.0]])
        self.pose = Se2.identity()
        self.clean = clean_polar(self.world, self.pose, QUIET)

    def render(self, **noise):
        return render_polar(self.world, self.pose, replace(QUIET, **noise), seed=5)

    def test_everything_off_is_the_clean_image(self):
        np.testing.assert_array_equal(self.render(), np.clip(self.clean, 0, 1))

    def test_speckle_raises_the_floor(self):
        difference = self.render(speckle_mean=0.05, speckle_variance=0.0025) - self.clean
        self.assertAlmostEqual(difference[self.clean == 0].mean(), 0.05, delta=0.005)

    def test_gain_noise_leaves_empty_bins_empty(self):
        polar = self.render(gain_std=0.3)
        np.testing.assert_array_equal(polar[self.clean == 0], 0.0)
        self.assertFalse(np.allclose(polar, self.clean))

    def test_ghosts_appear_at_doubled_range(self):
        gain = 0.3
        polar = self.render(ghost_rate=1.0, ghost_gain=gain)
        extra = polar - np.clip(self.clean, 0, 1)
        rows, cols = np.nonzero(extra > 1e-12)
        self.assertGreater(len(rows), 0)
        # bin c echoes into bin 2c, whose centre is within half a bin of twice the range
        self.assertTrue(np.all(cols % 2 == 0))
        unclipped = polar[rows, cols] < 1.0
        np.testing.assert_allclose(
            extra[rows, cols][unclipped], gain * self.clean[rows, cols // 2][unclipped], rtol=1e-9, atol=1e-12
        )

    def test_saturation(self):
        np.testing.assert_array_equal(self.render(saturation_probability=1.0), 1.0)

    def test_dropout_blanks_a_sector(self):
        polar = self.render(speckle_mean=0.05, speckle_variance=0.0025, dropout_sectors=1, dropout_width=0.5)
        blank = np.all(polar == 0, axis=1)
        self.assertAlmostEqual(blank.sum(), 0.5 / QUIET.azimuth_step, delta=1.0)


class MaskAndOracleTests(SimpleTestCase):
    def test_landmark_mask_ignores_movers(self):
        world = World(80.0, reflectors=[[6.0, 0.0]], movers=[Mover([[-6.0, 0.0], [-6.0, 1.0]], 0.0)])
        mask = landmark_mask(world, Se2.identity(), QUIET)
        scan = render_scan(world, Se2.identity(), QUIET, seed=0)
        reflector = np.round(world2pix([6.0, 0.0], scan)).astype(int)
        mover = np.round(world2pix([-6.0, 0.0], scan)).astype(int)
        self.assertTrue(mask[reflector[1], reflector[0]])
        self.assertFalse(mask[mover[1], mover[0]])
        self.assertGreater(scan.plane[mover[1], mover[0]], 0.1)

    def test_oracle_recovers_relative_pose(self):
        world = World(80.0, walls=[[-8.0, 12.0, 6.0, 12.0]], reflectors=[[5.0, 5.0], [-3.0, 8.0], [10.0, -4.0]])
        a = Se2.from_xytheta(0.0, 0.0, 0.0)
        b = Se2.from_xytheta(2.0, 0.5, 0.1)
        solution = solve_pose(oracle_correspondences(world, a, b, SimulatorOptions()))
        expected = (a.inverse() @ b).inverse()
        np.testing.assert_allclose(solution.pose.as_matrix(), expected.as_matrix(), atol=1e-9)

    def test_oracle_needs_shared_landmarks(self):
        with self.assertRaises(NoInformationError):
            oracle_correspondences(World(80.0), Se2.identity(), Se2.identity(), SimulatorOptions())


class DatasetTests(SimpleTestCase):
    def setUp(self):
        self.options = replace(SimulatorOptions(), cart_size=32, n_movers=0)
        self.trajectory = generate_trajectory("straight", 6.0, 2.0)
        self.world = generate_world(self.options, 1, avoid=[self.trajectory.positions])

    def test_counts(self):
        dataset = make_dataset(self.world, self.trajectory, self.options, seed=1)
        self.assertEqual(len(dataset.scans), 4)
        self.assertEqual(len(dataset.relative_poses), 3)

    def test_repeated_pose_gives_identical_scans(self):
        still = Trajectory([0.0, 0.2], [[1.0, 1.0, 0.2], [1.0, 1.0, 0.2]])
        dataset = make_dataset(self.world, still, self.options, seed=1)
        np.testing.assert_array_equal(dataset.scans[0].data, dataset.scans[1].data)

    def test_regeneration_is_bit_identical(self):
        a = make_dataset(self.world, self.trajectory, self.options, seed=1)
        b = make_dataset(generate_world(self.options, 1, avoid=[self.trajectory.positions]), self.trajectory, self.options, seed=1)
        for x, y in zip(a.scans, b.scans):
            np.testing.assert_array_equal(x.data, y.data)

    def test_world_keeps_clear_of_the_path(self):
        trajectory = generate_trajectory("loop", 160.0, 2.0)
        world = generate_world(SimulatorOptions(), 3, avoid=[trajectory.positions])
        for point in trajectory.positions:
            self.assertGreaterEqual(np.min(np.linalg.norm(world.reflectors - point, axis=1)), 2.0)


class StoreTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_scan_round_trip(self):
        scan = render_scan(World(80.0, reflectors=[[3.0, 1.0]]), Se2.identity(), QUIET, seed=0)
        write_scan(self.root / "a.rkscan", scan, 17)
        loaded, pose_id = read_scan(self.root / "a.rkscan")
        self.assertEqual(pose_id, 17)
        self.assertEqual(loaded.resolution, scan.resolution)
        np.testing.assert_allclose(loaded.data, scan.data, atol=1e-7)
        np.testing.assert_allclose(loaded.origin, scan.origin)

    def test_truncated_scan_reports_offset(self):
        scan = render_scan(World(80.0), Se2.identity(), QUIET, seed=0)
        path = self.root / "a.rkscan"
        write_scan(path, scan, 0)
        path.write_bytes(path.read_bytes()[: SCAN_HEADER.itemsize + 10])
        with self.assertRaises(DataError) as ctx:
            read_scan(path)
        self.assertIn(f"byte offset {SCAN_HEADER.itemsize + 8}", str(ctx.exception))

    def test_trajectory_round_trip_is_exact(self):
        trajectory = generate_trajectory("figure-eight", 60.0, 1.0)
        write_trajectory(self.root / "t.txt", trajectory)
        loaded = read_trajectory(self.root / "t.txt")
        np.testing.assert_array_equal(loaded.poses, trajectory.poses)
        np.testing.assert_array_equal(loaded.timestamps, trajectory.timestamps)

    def test_trajectory_lines_are_id_x_y_theta(self):
        trajectory = generate_trajectory("straight", 3.0, 1.0, speed=2.0)
        write_trajectory(self.root / "t.txt", trajectory)
        lines = (self.root / "t.txt").read_text().splitlines()
        self.assertEqual(lines[0], "# rks-trajectory v2")
        self.assertEqual(lines[1], "# t 0.0 0.5 1.0 1.5")
        self.assertEqual(lines[2:], [f"{i} {float(i)!r} 0.0 0.0" for i in range(4)])

    def test_four_field_file_round_trip(self):
        path = self.root / "t.txt"
        path.write_text("# rks-trajectory v2\n# exported elsewhere\n0 0.0 0.0 0.0\n1 1.5 -0.25 0.125\n")
        loaded = read_trajectory(path)
        np.testing.assert_array_equal(loaded.poses, [[0.0, 0.0, 0.0], [1.5, -0.25, 0.125]])
        np.testing.assert_array_equal(loaded.timestamps, [0.0, 1.0])
        write_trajectory(self.root / "again.txt", loaded)
        again = read_trajectory(self.root / "again.txt")
        np.testing.assert_array_equal(again.poses, loaded.poses)
        np.testing.assert_array_equal(again.timestamps, loaded.timestamps)

    def test_version_one_files_are_read(self):
        path = self.root / "t.txt"
        path.write_text("# rks-trajectory v1\n0 0.0 1.0 2.0 0.5\n1 0.25 1.5 2.0 0.5\n")
        loaded = read_trajectory(path)
        np.testing.assert_array_equal(loaded.timestamps, [0.0, 0.25])
        np.testing.assert_array_equal(loaded.poses[1], [1.5, 2.0, 0.5])

    def test_timestamp_count_must_match(self):
        path = self.root / "t.txt"
        path.write_text("# rks-trajectory v2\n# t 0.0\n0 0.0 0.0 0.0\n1 1.0 0.0 0.0\n")
        with self.assertRaises(DataError) as ctx:
            read_trajectory(path)
        self.assertIn("line 2", str(ctx.exception))

    def test_bad_trajectory_line(self):
        path = self.root / "t.txt"
        path.write_text("# rks-trajectory v1\n0 0.0 0.0 0.0 0.0\n1 0.1 nope 0.0 0.0\n")
        with self.assertRaises(DataError) as ctx:
            read_trajectory(path)
        self.assertIn("line 3", str(ctx.exception))

    def test_dataset_and_world_round_trip(self):
        options = replace(SimulatorOptions(), cart_size=32)
        trajectory = generate_trajectory("straight", 4.0, 2.0)
        world = generate_world(options, 6, avoid=[trajectory.positions])
        dataset = make_dataset(world, trajectory, options, seed=2)
        write_dataset(self.root, "train", dataset, world)
        loaded = read_dataset(self.root, "train")
        self.assertEqual(len(loaded), 3)
        reloaded_world = load_world(self.root / "world.yaml")
        np.testing.assert_array_equal(reloaded_world.walls, world.walls)
        self.assertEqual(len(reloaded_world.movers), len(world.movers))

    def test_world_yaml_errors_name_the_line(self):
        path = self.root / "world.yaml"
        path.write_text("version: 1\nextent: 80\nwalls: [[1, 2\n")
        with self.assertRaises(DataError) as ctx:
            load_world(path)
        self.assertIn("line", str(ctx.exception))

    def test_world_save_load(self):
        world = World(20.0, walls=[[0, 0, 1, 1]], reflectors=[[2, 2]], movers=[Mover([[0, 0], [3, 0]], 2.0)], seed=5)
        save_world(self.root / "w.yaml", world)
        loaded = load_world(self.root / "w.yaml")
        np.testing.assert_allclose(loaded.movers[0].position(1.0), [2.0, 0.0])
        self.assertEqual(loaded.seed, 5)
