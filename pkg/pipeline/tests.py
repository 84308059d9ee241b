import os
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from dataclasses import replace
from io import StringIO
from pathlib import Path
from unittest import skipUnless

import numpy as np
import yaml
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from core.exceptions import ConfigurationError, DataError
from core.geometry import Se2
from evaluation.reports import read_csv
from evaluation.services import absolute_trajectory_error, kitti_drift
from keypoints.services import extract_keypoints
from learner.checkpoint import load_checkpoint, save_checkpoint
from learner.network import FeatureNet, forward
from learner.services import TrainConfig
from learner.signals import train_step_finished
from manage import main
from place_recognition.services import (
    EmbeddingIndex,
    LocationEmbedding,
    PlaceRecognitionOptions,
    embed,
    embed_keypoints,
    recall_at_n,
)
from pose_graph.services import PoseGraphOptions
from pose_graph.store import read_graph
from simulator.services import (
    Dataset,
    SimulatorOptions,
    Trajectory,
    generate_trajectory,
    landmark_mask,
    make_dataset,
)
from simulator.store import read_dataset, read_trajectory, read_world, write_trajectory
from simulator.world import generate_world

from .conf import (
    PROVENANCE,
    RunContext,
    config_hash,
    describe_config,
    load_config,
    merge_config,
    module_seeds,
    write_manifest,
)
from .services import (
    NetworkFrontend,
    OracleFrontend,
    SlamRunner,
    calibrate_closure_threshold,
    closure_threshold,
    odometry,
)

SLOW = os.environ.get("RKS_SLOW_TESTS") == "1"

SMALL = {
    "pipeline": {
        "sequences": {
            "train": {"length": 24.0, "step": 2.0},
            "test": {"length": 24.0, "step": 2.0, "lateral_offset": 0.5},
        },
    },
    "simulator": {"cart_size": 32, "world_extent": 30.0, "n_buildings": 6, "n_reflectors": 30, "n_movers": 1},
    "learner": {"encoder_channels": [2, 2, 4], "decoder_channels": [4, 2, 2]},
}

LOOPED = {
    "pipeline": {
        "sequences": {
            "train": {"length": 40.0, "step": 2.0, "laps": 2},
            "test": {"length": 40.0, "step": 2.0, "lateral_offset": 1.0},
        },
        "slam_sequence": "train",
    },
    "simulator": {"cart_size": 32, "world_extent": 30.0, "n_buildings": 6, "n_reflectors": 30, "n_movers": 0},
    "learner": {"encoder_channels": [2, 2, 4], "decoder_channels": [4, 2, 2], "steps": 3},
}


def write_yaml(path, document):
    Path(path).write_text(yaml.safe_dump(document))
    return str(path)


def run(name, *args, **options):
    stdout = StringIO()
    call_command(name, *args, stdout=stdout, **options)
    return stdout.getvalue()


class ConfigTests(SimpleTestCase):
    def test_defaults_merge(self):
        config = load_config()
        self.assertEqual(config["matcher"]["temperature"], 50.0)
        merged = merge_config({"matcher": {"temperature": 20}})
        self.assertEqual(merged["matcher"]["temperature"], 20.0)
        self.assertIsInstance(merged["matcher"]["temperature"], float)
        self.assertEqual(merged["matcher"]["block_size"], 64)

    def test_unknown_keys_are_named(self):
        with self.assertRaises(ConfigurationError) as ctx:
            merge_config({"simulator": {"cart_sizee": 3}, "nonsense": 1})
        self.assertIn("simulator.cart_sizee", str(ctx.exception))
        self.assertIn("nonsense", str(ctx.exception))

    def test_value_types(self):
        self.assertEqual(merge_config({"learner": {"learning_rate": "1e-3"}})["learner"]["learning_rate"], 1e-3)
        with self.assertRaises(ConfigurationError):
            merge_config({"matcher": {"temperature": "hot"}})
        with self.assertRaises(ConfigurationError):
            merge_config({"keypoints": {"use_score_head": "no"}})
        self.assertEqual(merge_config({"keypoints": {"keypoint_count": 64}})["keypoints"]["keypoint_count"], 64)

    def test_sequences_are_open(self):
        merged = merge_config({"pipeline": {"sequences": {"extra": {"kind": "straight", "length": 30, "step": 1}}}})
        self.assertEqual(merged["pipeline"]["sequences"]["extra"]["laps"], 1)
        with self.assertRaises(ConfigurationError):
            merge_config({"pipeline": {"sequences": {"extra": {"length": 30, "step": 1}}}})
        with self.assertRaises(ConfigurationError):
            merge_config({"pipeline": {"sequences": {"train": {"speed": 3}}}})
        with self.assertRaises(ConfigurationError):
            merge_config({"pipeline": {"slam_sequence": "missing"}})

    def test_yaml_errors_name_the_line(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.yaml"
            path.write_text("simulator:\n  cart_size: [1, 2\n")
            with self.assertRaises(DataError) as ctx:
                load_config(path)
        self.assertIn("at line", str(ctx.exception))

    def test_hash(self):
        a = load_config()
        b = merge_config({"pipeline": {"seed": 99}})
        c = merge_config({"learner": {"steps": 10}})
        self.assertRegex(config_hash(a), r"^[0-9a-f]{16}$")
        self.assertEqual(config_hash(a), config_hash(b))
        self.assertNotEqual(config_hash(a), config_hash(c))

    def test_module_seeds(self):
        seeds = module_seeds(7)
        self.assertEqual(seeds, module_seeds(7))
        self.assertEqual(len(set(seeds.values())), len(seeds))
        self.assertNotEqual(seeds, module_seeds(8))

    def test_every_key_has_provenance(self):
        table = describe_config()
        self.assertEqual(set(table["key"]), set(PROVENANCE))
        self.assertTrue(set(table["provenance"]) <= {"published", "design"})
        self.assertEqual(table.set_index("key").loc["pose_solver.alpha", "provenance"], "published")

    def test_seed_override(self):
        context = RunContext.build(seed=123)
        self.assertEqual(context.seed, 123)
        self.assertEqual(context.seeds, module_seeds(123))
        with self.assertRaises(ConfigurationError):
            RunContext.build(seed=-1)


class SignalTests(SimpleTestCase):
    def test_train_steps_are_logged(self):
        with self.assertLogs("pipeline.signals", "INFO") as logs:
            train_step_finished.send(sender=self.__class__, step=4, loss=0.5, skipped=False, weight_sum=3.0)
        self.assertEqual(logs.records[0].step, 4)
        self.assertEqual(logs.records[0].phase, "odometry")


def oracle_setup(length=60.0, step=1.0):
    options = SimulatorOptions(world_extent=30.0, n_buildings=6, n_reflectors=30, n_movers=0)
    trajectory = generate_trajectory("loop", length, step)
    world = generate_world(options, 5, avoid=[trajectory.positions])
    return Dataset([None] * len(trajectory), trajectory), world, options


class OdometryTests(SimpleTestCase):
    def test_oracle_odometry_has_negligible_drift(self):
        dataset, world, options = oracle_setup()
        estimate, steps, embeddings = odometry(OracleFrontend(world, dataset, options), dataset)
        self.assertEqual(embeddings, [])
        self.assertEqual(len(steps), len(dataset) - 1)
        report = kitti_drift(estimate.poses, dataset.trajectory.poses, (10.0, 20.0, 40.0))
        self.assertLess(report.translation_pct, 0.1)

    def test_missing_estimates_repeat_the_previous_motion(self):
        dataset, world, options = oracle_setup(length=20.0, step=2.0)

        class Gappy(OracleFrontend):
            def relative(self, src, dst, src_features=None, dst_features=None):
                return None if dst == 4 else super().relative(src, dst)

        _, steps, _ = odometry(Gappy(world, dataset, options), dataset)
        np.testing.assert_allclose(steps[3][0].as_matrix(), steps[2][0].as_matrix())
        self.assertEqual(steps[3][1], 0.0)


class NetworkFrontendTests(SimpleTestCase):
    def setUp(self):
        config = merge_config(SMALL)
        options = SimulatorOptions.from_dict(config["simulator"])
        trajectory = generate_trajectory("straight", 4.0, 2.0)
        world = generate_world(options, 3, avoid=[trajectory.positions])
        self.dataset = make_dataset(world, trajectory, options, seed=1)
        self.cfg = TrainConfig.from_config(config)
        self.net = self.cfg.build_network()

    def test_embedding_source(self):
        dense = NetworkFrontend(self.net, self.dataset, self.cfg)
        pooled = NetworkFrontend(self.net, self.dataset, self.cfg, embedding="keypoints")
        features = dense.features(1)
        np.testing.assert_array_equal(dense.embedding(1, features).vector, embed(features.descriptor_map).vector)
        keypoints = extract_keypoints(features, self.cfg.keypoints)
        vector = pooled.embedding(1, features)
        np.testing.assert_array_equal(vector.vector, embed_keypoints(keypoints).vector)
        self.assertEqual(vector.scan_id, 1)
        np.testing.assert_array_equal(vector.position, self.dataset.trajectory.positions[1])


CENTRES = np.stack(np.meshgrid(np.arange(-40.0, 41.0, 10.0), np.arange(-10.0, 61.0, 10.0)), axis=-1).reshape(-1, 2)


class PlaceFrontend:
    """Exact loop-closure poses, heading-biased odometry and position-derived embeddings."""

    def __init__(self, truth, bias=0.01):
        self.truth = truth
        self.bias = bias

    def features(self, index):
        return index

    def embedding(self, index, features):
        position = self.truth[index].translation
        vector = np.exp(-np.sum((CENTRES - position) ** 2, axis=1) / (2 * 8.0**2))
        return LocationEmbedding(vector, index, 0, position)

    def relative(self, src, dst, src_features=None, dst_features=None):
        exact = self.truth[src].inverse() @ self.truth[dst]
        if dst == src + 1:
            return exact @ Se2.from_xytheta(0.0, 0.0, self.bias), 10.0
        return exact, 10.0


class SlamRunnerTests(SimpleTestCase):
    def setUp(self):
        self.trajectory = generate_trajectory("loop", 160.0, 2.0)
        self.truth = self.trajectory.se2_poses()
        self.dataset = Dataset([None] * len(self.trajectory), self.trajectory)

    def slam(self, queue_size=64, optimise_every=10):
        runner = SlamRunner(
            PlaceFrontend(self.truth),
            self.dataset,
            PlaceRecognitionOptions(closure_threshold=0.95, min_index_gap=10, backend="linear"),
            PoseGraphOptions(),
            queue_size=queue_size,
            optimise_every=optimise_every,
        )
        return runner.run()

    def test_closures_reduce_trajectory_error(self):
        result = self.slam()
        self.assertGreater(int(result.proposals["accepted"].sum()), 0)
        self.assertGreater(result.optimisations, 0)
        positions = self.trajectory.positions
        optimised = absolute_trajectory_error(result.graph.positions(), positions)
        open_loop = absolute_trajectory_error(np.array([p.translation for p in result.open_loop]), positions)
        self.assertLess(optimised, open_loop)
        self.assertEqual(len(result.graph.nodes), len(self.trajectory))

    def test_accepted_closures_are_true_revisits(self):
        result = self.slam()
        accepted = result.proposals[result.proposals["accepted"]]
        positions = self.trajectory.positions
        gaps = np.linalg.norm(positions[accepted["query"]] - positions[accepted["match"]], axis=1)
        self.assertTrue(np.all(gaps <= 5.0))
        self.assertTrue(np.all(accepted["query"] - accepted["match"] >= 10))

    def test_result_does_not_depend_on_scheduling(self):
        a = self.slam(queue_size=1, optimise_every=10)
        b = self.slam(queue_size=64, optimise_every=10)
        self.assertEqual(sorted(e.edge_id for e in a.graph.edges), sorted(e.edge_id for e in b.graph.edges))
        np.testing.assert_array_equal(a.graph.positions(), b.graph.positions())
        self.assertTrue(a.proposals.equals(b.proposals))

    def test_role_failure_surfaces(self):
        class Broken(PlaceFrontend):
            def embedding(self, index, features):
                if index == 5:
                    raise DataError("scan 5 is unreadable")
                return super().embedding(index, features)

        runner = SlamRunner(Broken(self.truth), self.dataset, queue_size=2)
        with self.assertRaises(DataError):
            runner.run()


class ClosureCalibrationTests(SimpleTestCase):
    def setUp(self):
        self.trajectory = generate_trajectory("loop", 160.0, 2.0)
        self.dataset = Dataset([None] * len(self.trajectory), self.trajectory)
        self.options = PlaceRecognitionOptions(closure_threshold=0.5, min_index_gap=10, backend="linear")

    def test_calibrated_threshold_accepts_only_true_revisits(self):
        frontend = PlaceFrontend(self.trajectory.se2_poses())
        calibration = calibrate_closure_threshold(frontend, self.dataset, self.options)
        self.assertGreater(calibration.true_positives, 0)
        self.assertEqual(calibration.false_positives, 0)

        options = replace(self.options, closure_threshold=calibration.threshold)
        result = SlamRunner(frontend, self.dataset, options, PoseGraphOptions()).run()
        accepted = result.proposals[result.proposals["accepted"]]
        self.assertEqual(len(accepted), calibration.true_positives)
        positions = self.trajectory.positions
        gaps = np.linalg.norm(positions[accepted["query"]] - positions[accepted["match"]], axis=1)
        self.assertTrue(np.all(gaps <= self.options.positive_radius))

    def test_short_sequence_keeps_the_configured_threshold(self):
        short = Dataset([None] * 5, Trajectory(self.trajectory.timestamps[:5], self.trajectory.poses[:5]))
        calibration = calibrate_closure_threshold(PlaceFrontend(self.trajectory.se2_poses()), short, self.options)
        self.assertEqual(calibration.threshold, 0.5)

    def test_slam_threshold_comes_from_the_train_manifest(self):
        context = RunContext.build()
        with tempfile.TemporaryDirectory() as tmp:
            checkpoint = Path(tmp) / "model.rkckpt"
            manifest = Path(tmp) / "train.manifest.yaml"
            self.assertEqual(closure_threshold(context, checkpoint), 0.95)
            write_manifest(manifest, context.manifest("train", closure_threshold=0.8125))
            self.assertEqual(closure_threshold(context, checkpoint), 0.8125)
            write_manifest(manifest, {**context.manifest("train", closure_threshold=0.8125), "config_hash": "0" * 16})
            self.assertEqual(closure_threshold(context, checkpoint), 0.95)


class CommandTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.config = write_yaml(cls.root / "small.yaml", SMALL)
        run("simulate", out=str(cls.root / "data"), config=cls.config)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_simulate_writes_every_sequence(self):
        data = self.root / "data"
        self.assertTrue((data / "world.yaml").exists())
        for name in ("train", "test"):
            self.assertEqual(len(list((data / name / "scans").glob("*.rkscan"))), 13)
        manifest = yaml.safe_load((data / "simulate.manifest.yaml").read_text())
        self.assertEqual(manifest["config_hash"], config_hash(load_config(self.config)))

    def test_simulate_is_byte_reproducible(self):
        again = self.root / "again"
        run("simulate", out=str(again), config=self.config)
        for relative in ("world.yaml", "test/trajectory.txt", "test/scans/000007.rkscan"):
            self.assertEqual((again / relative).read_bytes(), (self.root / "data" / relative).read_bytes())

    def test_oracle_odometry_and_eval(self):
        out = self.root / "oracle"
        run("odometry", dataset=str(self.root / "data"), oracle=True, out=str(out), config=self.config)
        run("odometry", dataset=str(self.root / "data"), oracle=True, out=str(out / "again"), config=self.config)
        self.assertEqual((out / "odometry.txt").read_bytes(), (out / "again" / "odometry.txt").read_bytes())
        run(
            "eval",
            estimate=str(out / "odometry.txt"),
            truth=str(self.root / "data" / "test" / "trajectory.txt"),
            out=str(out / "eval"),
            config=self.config,
        )
        summary, _ = read_csv(out / "eval" / "summary.csv")
        drift = summary.set_index("metric").loc["translation_pct", "value"]
        self.assertLess(drift, 0.1)

    def test_eval_of_ground_truth_is_zero(self):
        truth = str(self.root / "data" / "train" / "trajectory.txt")
        out = self.root / "self-eval"
        run("eval", estimate=truth, truth=truth, out=str(out))
        summary, header = read_csv(out / "summary.csv")
        self.assertTrue((summary["value"].abs() < 1e-9).all())
        self.assertEqual(header["title"], "summary")
        self.assertTrue((out / "drift.txt").read_text().startswith("# rks drift config="))

    def test_train_odometry_slam_and_export(self):
        out = self.root / "model"
        run("train", dataset=str(self.root / "data"), steps=2, out=str(out), config=self.config)
        losses, _ = read_csv(out / "losses.csv")
        self.assertEqual(len(losses), 2)
        calibrated = yaml.safe_load((out / "train.manifest.yaml").read_text())["closure_threshold"]
        self.assertIsInstance(calibrated, float)

        checkpoint = str(out / "model.rkckpt")
        run("odometry", dataset=str(self.root / "data"), checkpoint=checkpoint, out=str(out / "odo"), config=self.config)
        self.assertTrue((out / "odo" / "embeddings.rkemb").exists())
        self.assertEqual(len(read_trajectory(out / "odo" / "odometry.txt")), 13)

        run(
            "slam",
            dataset=str(self.root / "data"),
            checkpoint=checkpoint,
            oracle=True,
            out=str(out / "slam"),
            config=self.config,
        )
        graph = read_graph(out / "slam" / "graph.txt")
        self.assertEqual(len(graph.nodes), 13)
        slam_manifest = yaml.safe_load((out / "slam" / "slam.manifest.yaml").read_text())
        self.assertEqual(slam_manifest["closure_threshold"], calibrated)
        closures, _ = read_csv(out / "slam" / "closures.csv")
        self.assertEqual(list(closures.columns)[:4], ["query", "match", "similarity", "accepted"])

        truth = str(self.root / "data" / "test" / "trajectory.txt")
        run(
            "eval",
            estimate=str(out / "slam" / "slam.txt"),
            truth=truth,
            closures=str(out / "slam" / "closures.csv"),
            out=str(out / "eval"),
            config=self.config,
        )
        self.assertTrue((out / "eval" / "precision_curve.csv").exists())

        export = out / "plots"
        run("plot_export", str(out / "slam" / "slam.txt"), str(out / "eval" / "drift.csv"), str(out / "losses.csv"),
            out=str(export), config=self.config)
        index = yaml.safe_load((export / "plots.yaml").read_text())["plots"]
        self.assertEqual([entry["kind"] for entry in index], ["trajectory", "drift", "losses"])
        for entry in index:
            self.assertFalse((export / entry["output"]).read_text().startswith("#"))

    def test_checkpoint_from_another_config_is_refused(self):
        path = self.root / "foreign.rkckpt"
        save_checkpoint(path, FeatureNet.initialised(0, (2, 2, 4), (4, 2, 2), 1.0), "0" * 16)
        with self.assertRaises(CommandError) as ctx:
            run("odometry", dataset=str(self.root / "data"), checkpoint=str(path), out=str(self.root / "x"),
                config=self.config)
        self.assertEqual(ctx.exception.returncode, 2)

    def test_network_odometry_needs_a_checkpoint(self):
        with self.assertRaises(CommandError) as ctx:
            run("odometry", dataset=str(self.root / "data"), out=str(self.root / "y"), config=self.config)
        self.assertEqual(ctx.exception.returncode, 2)

    def test_corrupt_inputs_exit_with_data_code(self):
        bad = self.root / "bad.txt"
        bad.write_text("# rks-trajectory v1\n0 0.0 0.0 0.0\n")
        with self.assertRaises(CommandError) as ctx:
            run("eval", estimate=str(bad), truth=str(bad), out=str(self.root / "z"))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn("line 2", str(ctx.exception))

        unknown = write_yaml(self.root / "unknown.yaml", {"matcher": {"temp": 3}})
        with self.assertRaises(CommandError) as ctx:
            run("simulate", out=str(self.root / "w"), config=unknown)
        self.assertEqual(ctx.exception.returncode, 2)

    def test_too_short_trajectory_is_a_data_error(self):
        short = self.root / "short.txt"
        write_trajectory(short, generate_trajectory("straight", 4.0, 1.0))
        with self.assertRaises(CommandError) as ctx:
            run("eval", estimate=str(short), truth=str(short), out=str(self.root / "s"))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_show_config(self):
        output = run("simulate", show_config=True)
        self.assertIn("pose_solver.alpha", output)

    def test_usage_errors_exit_with_one(self):
        stderr = StringIO()
        with self.assertRaises(SystemExit) as ctx, redirect_stderr(stderr):
            main(["rks", "odometry"])
        self.assertEqual(ctx.exception.code, 1)
        self.assertIn("--dataset", stderr.getvalue())
        with self.assertRaises(SystemExit) as ctx, redirect_stderr(StringIO()):
            main(["rks", "eval", "--estimate", "a.txt", "--truth", "b.txt", "--bogus"])
        self.assertEqual(ctx.exception.code, 1)
        with self.assertRaises(CommandError) as ctx:
            run("slam", dataset="data")
        self.assertEqual(ctx.exception.returncode, 1)

    def test_hyphenated_command_names(self):
        buffer = StringIO()
        with redirect_stdout(buffer):
            main(["rks", "benchmark-matcher", "--keypoints", "8", "--size", "16", "--channels", "2", "--repeats", "1"])
        self.assertIn("best", buffer.getvalue())


class PipelineRerunTests(SimpleTestCase):
    """simulate, train, odometry and slam at toy scale, twice over, on a two-lap loop without movers."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.config = write_yaml(cls.root / "looped.yaml", LOOPED)
        data = str(cls.root / "data")
        run("simulate", out=data, config=cls.config)
        for name in ("a", "b"):
            out = cls.root / name
            run("train", dataset=data, out=str(out / "model"), config=cls.config)
            checkpoint = str(out / "model" / "model.rkckpt")
            run("odometry", dataset=data, checkpoint=checkpoint, out=str(out / "odo"), config=cls.config)
            run("slam", dataset=data, checkpoint=checkpoint, out=str(out / "slam"), config=cls.config)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_reruns_are_byte_identical(self):
        for relative in (
            "model/model.rkckpt",
            "model/losses.csv",
            "odo/odometry.txt",
            "odo/embeddings.rkemb",
            "slam/slam.txt",
            "slam/open_loop.txt",
            "slam/graph.txt",
            "slam/closures.csv",
        ):
            with self.subTest(file=relative):
                self.assertEqual((self.root / "a" / relative).read_bytes(), (self.root / "b" / relative).read_bytes())

    def test_slam_closes_exact_revisits(self):
        closures, _ = read_csv(self.root / "a" / "slam" / "closures.csv")
        accepted = closures[closures["accepted"]]
        self.assertGreater(len(accepted), 0)
        positions = read_trajectory(self.root / "data" / "train" / "trajectory.txt").positions
        gaps = np.linalg.norm(positions[accepted["query"]] - positions[accepted["match"]], axis=1)
        self.assertTrue(np.all(gaps <= PlaceRecognitionOptions().positive_radius))
        graph = read_graph(self.root / "a" / "slam" / "graph.txt")
        self.assertEqual(len(graph.nodes), len(positions))
        self.assertEqual(len(graph.loop_edges()), len(accepted))


@skipUnless(SLOW, "set RKS_SLOW_TESTS=1 to run the end-to-end pipeline")
class EndToEndTests(SimpleTestCase):
    """Default configuration, full training run."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.data = cls.root / "data"
        cls.checkpoint = cls.root / "model" / "model.rkckpt"
        run("simulate", out=str(cls.data))
        run("train", dataset=str(cls.data), out=str(cls.root / "model"))
        cls.context = RunContext.build()
        cls.cfg = TrainConfig.from_config(cls.context.config, cls.context.seeds["learner"])
        cls.net, _ = load_checkpoint(cls.checkpoint, expected_hash=cls.context.config_hash)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_trained_slam_closes_the_loop(self):
        run("slam", dataset=str(self.data), checkpoint=str(self.checkpoint), out=str(self.root / "slam"))
        closures, _ = read_csv(self.root / "slam" / "closures.csv")
        self.assertGreater(int(closures["accepted"].sum()), 0)
        truth = read_trajectory(self.data / "test" / "trajectory.txt").positions
        optimised = read_trajectory(self.root / "slam" / "slam.txt").positions
        open_loop = read_trajectory(self.root / "slam" / "open_loop.txt").positions
        self.assertLess(absolute_trajectory_error(optimised, truth), absolute_trajectory_error(open_loop, truth))

    def test_training_halves_odometry_drift(self):
        dataset = read_dataset(self.data, "test")
        lengths = self.context.config["evaluation"]["lengths"]

        def drift(net):
            estimate, _, _ = odometry(NetworkFrontend(net, dataset, self.cfg), dataset)
            return kitti_drift(estimate.poses, dataset.trajectory.poses, lengths).translation_pct

        self.assertLessEqual(drift(self.net), 0.5 * drift(self.cfg.build_network()))

    def test_scores_are_low_off_landmarks(self):
        dataset = read_dataset(self.data, "test")
        world = read_world(self.data)
        options = SimulatorOptions.from_dict(self.context.config["simulator"])
        on, off = [], []
        for i in range(0, len(dataset), 4):
            keypoints = extract_keypoints(forward(self.net, dataset.scans[i])[0], self.cfg.keypoints)
            mask = landmark_mask(world, dataset.trajectory[i], options)
            cells = np.clip(np.round(keypoints.locations).astype(int), 0, options.cart_size - 1)
            lit = mask[cells[:, 1], cells[:, 0]]
            on.extend(keypoints.scores[lit])
            off.extend(keypoints.scores[~lit])
        self.assertLess(np.mean(off), np.mean(on))

    def test_trained_embeddings_recall_revisits(self):
        index = EmbeddingIndex("kdtree")
        queries = []
        for trajectory_id, name in enumerate(("train", "test")):
            dataset = read_dataset(self.data, name)
            frontend = NetworkFrontend(self.net, dataset, self.cfg, trajectory_id)
            for i in range(len(dataset)):
                embedding = frontend.embedding(i, frontend.features(i))
                index.add(embedding)
                if name == "test":
                    queries.append(embedding)
        self.assertGreaterEqual(recall_at_n(queries, index, 1, distance=5.0), 0.9)
