import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy.optimize import minimize

from core.exceptions import ConfigurationError, DataError, InsufficientLengthError
from core.geometry import Se2, rot

from .reports import drift_frame, precision_frame, read_csv, write_csv, write_table
from .services import (
    ClosureProposal,
    EvaluationOptions,
    absolute_trajectory_error,
    closure_precision,
    kitti_drift,
    precision_recall_curve,
    subsequence_errors,
)

LENGTHS = (10.0, 20.0, 40.0, 80.0)


def straight(n, spacing=1.0):
    return np.column_stack([spacing * np.arange(n), np.zeros(n), np.zeros(n)])


def wiggly(n, seed=0):
    rng = np.random.default_rng(seed)
    headings = np.cumsum(rng.normal(0.0, 0.05, n))
    steps = np.column_stack([np.cos(headings), np.sin(headings)])
    positions = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)[:-1]])
    return np.column_stack([positions, headings])


def transformed(poses, G):
    return [G @ Se2.from_vector(p) for p in poses]


class DriftTests(SimpleTestCase):
    def test_identity_estimate_has_zero_drift(self):
        gt = wiggly(150)
        report = kitti_drift(gt, gt, LENGTHS)
        self.assertEqual(report.translation_pct, 0.0)
        self.assertEqual(report.rotation_deg_per_m, 0.0)
        self.assertTrue((report.per_length["translation_pct"] == 0.0).all())

    def test_constant_scale_bias_gives_one_percent(self):
        gt = straight(200)
        est = gt.copy()
        est[:, 0] *= 1.01
        report = kitti_drift(est, gt, EvaluationOptions().lengths)
        self.assertAlmostEqual(report.translation_pct, 1.0, delta=0.01)
        np.testing.assert_allclose(report.per_length["translation_pct"], 1.0, atol=0.01)
        self.assertEqual(report.rotation_deg_per_m, 0.0)

    def test_bias_matches_brute_force_enumeration(self):
        gt = straight(60)
        est = gt.copy()
        est[:, 0] *= 1.01
        expected = []
        for start in range(60):
            for length in (10.0, 20.0):
                if start + length <= 59:
                    expected.append(abs(1.01 * length - length) / length)
        report = kitti_drift(est, gt, (10.0, 20.0))
        self.assertEqual(len(report.subsequences), len(expected))
        self.assertAlmostEqual(report.translation_pct, 100.0 * np.mean(expected), places=9)

    def test_single_window_matches_hand_computation(self):
        gt = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
        est = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [10.0, 1.0, 0.1]])
        report = kitti_drift(est, gt, (10.0,))
        self.assertEqual(len(report.subsequences), 1)
        self.assertAlmostEqual(report.translation_pct, 10.0, places=9)
        self.assertAlmostEqual(report.rotation_deg_per_m, np.degrees(0.01), places=9)

    def test_endpoint_is_nearest_frame(self):
        gt = straight(30, spacing=3.0)
        errors = subsequence_errors(gt, gt, (10.0,))
        # 10 m from frame 0 lands between frames 3 (9 m) and 4 (12 m)
        self.assertEqual(int(errors.iloc[0]["end"]), 3)

    def test_invariant_to_global_rigid_transform(self):
        gt = wiggly(120, seed=1)
        est = wiggly(120, seed=2)
        G = Se2.from_xytheta(30.0, -12.0, 2.3)
        a = kitti_drift(est, gt, LENGTHS)
        b = kitti_drift(transformed(est, G), transformed(gt, G), LENGTHS)
        self.assertAlmostEqual(a.translation_pct, b.translation_pct, places=9)
        self.assertAlmostEqual(a.rotation_deg_per_m, b.rotation_deg_per_m, places=9)

    def test_breakdown_is_consistent_with_headline(self):
        gt = wiggly(120, seed=3)
        est = wiggly(120, seed=4)
        report = kitti_drift(est, gt, LENGTHS)
        table = report.per_length
        pooled = np.average(table["translation_pct"], weights=table["subsequences"])
        self.assertAlmostEqual(pooled, report.translation_pct, places=9)
        self.assertTrue((table["translation_pct"] >= 0).all())

    def test_short_trajectory_is_refused(self):
        gt = straight(5)
        with self.assertRaises(InsufficientLengthError):
            kitti_drift(gt, gt, (10.0,))

    def test_length_mismatch_is_refused(self):
        with self.assertRaises(DataError):
            kitti_drift(straight(20), straight(21), (10.0,))

    def test_options_validate(self):
        with self.assertRaises(ConfigurationError):
            EvaluationOptions(lengths=(0.0, 10.0))
        options = EvaluationOptions.from_dict({"lengths": [5, 15], "distance": 3.0, "unrelated": 1})
        self.assertEqual(options.lengths, (5.0, 15.0))


class ClosurePrecisionTests(SimpleTestCase):
    positions = np.array([[0.0, 0.0], [1.0, 0.0], [50.0, 0.0], [2.0, 1.0], [80.0, 5.0]])

    def test_coincident_proposals_are_all_correct(self):
        proposals = [ClosureProposal(3, 0, 0.99), ClosureProposal(1, 0, 0.97)]
        report = closure_precision(proposals, self.positions, 5.0)
        self.assertEqual(report.precision, 1.0)
        self.assertEqual(report.recall, 1.0)
        self.assertEqual((report.true_positives, report.false_positives), (2, 0))

    def test_no_proposals_convention(self):
        report = closure_precision([], self.positions, 5.0)
        self.assertEqual(report.precision, 1.0)
        self.assertEqual(report.recall, 0.0)

    def test_distance_must_be_positive(self):
        with self.assertRaises(ConfigurationError):
            closure_precision([ClosureProposal(1, 0, 0.9)], self.positions, 0.0)

    def test_mixed_set_matches_enumeration(self):
        rng = np.random.default_rng(8)
        positions = rng.uniform(0.0, 40.0, (60, 2))
        proposals = [
            ClosureProposal(int(q), int(m), float(s))
            for q, m, s in zip(rng.integers(0, 60, 80), rng.integers(0, 60, 80), rng.uniform(0.5, 1.0, 80))
        ]
        threshold = 0.8
        tp = fp = positives = 0
        for p in proposals:
            close = np.hypot(*(positions[p.query] - positions[p.match])) <= 5.0
            positives += close
            if p.similarity >= threshold:
                tp += close
                fp += not close
        report = closure_precision(proposals, positions, 5.0, threshold)
        self.assertEqual((report.true_positives, report.false_positives), (tp, fp))
        self.assertAlmostEqual(report.precision * (tp + fp), tp)
        self.assertAlmostEqual(report.recall, tp / positives)

    def test_curve_recall_falls_as_threshold_rises(self):
        rng = np.random.default_rng(9)
        positions = rng.uniform(0.0, 40.0, (40, 2))
        proposals = [
            ClosureProposal(int(q), int(m), float(s))
            for q, m, s in zip(rng.integers(0, 40, 50), rng.integers(0, 40, 50), rng.uniform(0.0, 1.0, 50))
        ]
        curve = precision_recall_curve(proposals, positions, 5.0)
        self.assertTrue(np.all(np.diff(curve["threshold"]) > 0))
        self.assertTrue(np.all(np.diff(curve["recall"]) <= 0))
        self.assertTrue(np.all(np.diff(curve["true_positives"] + curve["false_positives"]) < 0))

    def test_separable_curve_reaches_full_precision(self):
        proposals = [
            ClosureProposal(3, 0, 0.99),
            ClosureProposal(1, 0, 0.95),
            ClosureProposal(2, 0, 0.90),
            ClosureProposal(4, 1, 0.85),
        ]
        curve = precision_recall_curve(proposals, self.positions, 5.0)
        self.assertTrue(np.all(np.diff(curve["precision"]) >= 0))
        self.assertEqual(curve["precision"].iloc[-1], 1.0)
        self.assertAlmostEqual(curve["precision"].iloc[0], 0.5)


class TrajectoryErrorTests(SimpleTestCase):
    def test_identical_trajectories(self):
        gt = wiggly(40)
        self.assertEqual(absolute_trajectory_error(gt, gt), 0.0)

    def test_rigid_gauge_is_removed(self):
        gt = wiggly(40, seed=5)
        G = Se2.from_xytheta(-4.0, 9.0, -2.0)
        self.assertLess(absolute_trajectory_error(transformed(gt, G), gt), 1e-9)

    def test_single_perturbation_matches_brute_force_alignment(self):
        gt = wiggly(25, seed=6)[:, :2]
        est = gt.copy()
        delta = np.array([0.6, -0.8])
        est[7] += delta

        def rmse(v):
            aligned = est @ rot(v[2]).T + v[:2]
            return np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1)))

        brute = minimize(rmse, np.zeros(3), method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12}).fun
        ate = absolute_trajectory_error(est, gt)
        self.assertAlmostEqual(ate, brute, places=6)
        self.assertLessEqual(ate, np.linalg.norm(delta) / np.sqrt(len(gt)) + 1e-12)

    def test_length_mismatch(self):
        with self.assertRaises(DataError):
            absolute_trajectory_error(wiggly(10), wiggly(11))


class ReportTests(SimpleTestCase):
    def test_drift_table_and_csv(self):
        gt = straight(100)
        est = gt.copy()
        est[:, 0] *= 1.01
        frame = drift_frame(kitti_drift(est, gt, (10.0, 20.0)))
        self.assertEqual(list(frame["length"]), ["10", "20", "all"])
        with tempfile.TemporaryDirectory() as tmp:
            write_table(Path(tmp) / "drift.txt", frame, "drift", "0123456789abcdef")
            write_csv(Path(tmp) / "drift.csv", frame, "drift", "0123456789abcdef")
            text = (Path(tmp) / "drift.txt").read_text()
            loaded, header = read_csv(Path(tmp) / "drift.csv")
        self.assertTrue(text.startswith("# rks drift config=0123456789abcdef\n"))
        self.assertEqual(header, {"title": "drift", "config": "0123456789abcdef"})
        np.testing.assert_allclose(loaded["translation_pct"], frame["translation_pct"], rtol=1e-9)

    def test_precision_frame_columns(self):
        frame = precision_frame([closure_precision([], np.zeros((1, 2)))])
        self.assertEqual(
            list(frame.columns), ["threshold", "true_positives", "false_positives", "precision", "recall"]
        )

    def test_headerless_csv_is_refused(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "plain.csv"
            path.write_text("a,b\n1,2\n")
            with self.assertRaises(DataError):
                read_csv(path)
