import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import scipy.sparse as sp
from django.test import SimpleTestCase
from sksparse.cholmod import cholesky

from core.exceptions import DataError
from core.geometry import Se2
from core.testing import assert_gradient_close, numerical_gradient
from evaluation.services import absolute_trajectory_error

from .services import (
    PoseGraph,
    PoseGraphOptions,
    PoseGraphStore,
    edge_jacobians,
    edge_residual,
    information_from_weight,
    optimise,
)
from .store import read_graph, write_graph

INFO = np.diag([4.0, 4.0, 400.0])


def circle_poses(n, radius=20.0):
    angles = 2 * np.pi * np.arange(n) / n
    return [Se2.from_xytheta(radius * np.sin(a), radius * (1 - np.cos(a)), a) for a in angles]


def noisy_loop(n=100, seed=0, bias=0.005, noise=0.002):
    """Ground truth circle, odometry with a heading bias, and one exact closure."""
    rng = np.random.default_rng(seed)
    truth = circle_poses(n)
    graph = PoseGraph()
    graph.add_node(0, truth[0])
    for i in range(n - 1):
        exact = truth[i].inverse() @ truth[i + 1]
        drift = Se2.from_xytheta(*rng.normal(0.0, 0.01, 2), bias + rng.normal(0.0, noise))
        graph.add_odometry_edge(i, i + 1, exact @ drift, INFO)
    graph.add_loop_edge(n - 1, 0, truth[n - 1].inverse() @ truth[0], 10 * INFO)
    return graph, truth


class EdgeTests(SimpleTestCase):
    def test_jacobians_match_finite_differences(self):
        Z = Se2.from_xytheta(0.7, -0.2, 0.4)
        xi = np.array([1.0, 2.0, 0.3])
        xj = np.array([1.5, 2.4, 0.9])
        A, B = edge_jacobians(Z, xi, xj)
        for row in range(3):
            di = numerical_gradient(lambda v: edge_residual(Z, Se2.from_vector(v), Se2.from_vector(xj))[row], xi)
            dj = numerical_gradient(lambda v: edge_residual(Z, Se2.from_vector(xi), Se2.from_vector(v))[row], xj)
            with self.subTest(row=row):
                assert_gradient_close(self, A[row], di)
                assert_gradient_close(self, B[row], dj)

    def test_residual_angle_is_wrapped(self):
        Z = Se2.from_xytheta(0.0, 0.0, 3.0)
        e = edge_residual(Z, Se2.identity(), Se2.from_xytheta(0.0, 0.0, -3.0))
        self.assertAlmostEqual(e[2], 2 * np.pi - 6.0)

    def test_information_from_weight(self):
        info = information_from_weight(2.0, PoseGraphOptions(translation_sigma=0.5, rotation_sigma=0.1))
        np.testing.assert_allclose(np.diag(info), [8.0, 8.0, 200.0])
        with self.assertRaises(DataError):
            information_from_weight(0.0)

    def test_rejects_bad_information(self):
        graph = PoseGraph()
        graph.add_node(0, Se2.identity())
        with self.assertRaises(DataError):
            graph.add_odometry_edge(0, 1, Se2.identity(), np.diag([1.0, 1.0, -1.0]))
        with self.assertRaises(DataError):
            graph.add_odometry_edge(0, 1, Se2.identity(), [[1, 2, 0], [0, 1, 0], [0, 0, 1]])


class GraphConstructionTests(SimpleTestCase):
    def test_odometry_chain_composes(self):
        graph = PoseGraph()
        graph.add_node(0, Se2.identity())
        steps = [Se2.from_xytheta(1.0, 0.1 * k, 0.05 * k) for k in range(5)]
        expected = Se2.identity()
        for k, step in enumerate(steps):
            graph.add_odometry_edge(k, k + 1, step, INFO)
            expected = expected @ step
        np.testing.assert_allclose(graph.nodes[5].as_matrix(), expected.as_matrix(), atol=1e-12)

    def test_consistent_loop_edge_adds_nothing(self):
        graph = PoseGraph()
        graph.add_node(0, Se2.identity())
        for k in range(4):
            graph.add_odometry_edge(k, k + 1, Se2.from_xytheta(2.0, 0.0, np.pi / 2), INFO)
        edge = graph.add_loop_edge(4, 0, graph.nodes[4].inverse() @ graph.nodes[0], INFO)
        self.assertAlmostEqual(graph.edge_chi2(edge), 0.0, places=20)

    def test_duplicate_edge_rejected(self):
        graph = PoseGraph()
        graph.add_node(0, Se2.identity())
        graph.add_odometry_edge(0, 1, Se2.identity(), INFO)
        with self.assertRaises(DataError):
            graph.add_odometry_edge(0, 1, Se2.identity(), INFO)
        with self.assertRaises(DataError):
            graph.add_loop_edge(0, 7, Se2.identity(), INFO)

    def test_disconnected_graph_is_refused(self):
        graph = PoseGraph()
        graph.add_node(0, Se2.identity())
        graph.add_odometry_edge(0, 1, Se2.identity(), INFO)
        graph.add_node(5, Se2.identity())
        self.assertFalse(graph.is_connected())
        with self.assertRaises(DataError):
            optimise(graph)


class OptimiseTests(SimpleTestCase):
    def test_consistent_graph_is_left_alone(self):
        graph = PoseGraph()
        graph.add_node(0, Se2.identity())
        for k in range(3):
            graph.add_odometry_edge(k, k + 1, Se2.from_xytheta(1.0, 0.5, 0.3), INFO)
        result, report = optimise(graph)
        self.assertLess(report.initial_chi2, 1e-20)
        self.assertEqual(report.iterations, 0)
        self.assertTrue(report.converged)
        for node in graph.nodes:
            np.testing.assert_array_equal(result.nodes[node].as_matrix(), graph.nodes[node].as_matrix())

    def test_two_nodes_recover_in_two_iterations(self):
        graph = PoseGraph()
        graph.add_node(0, Se2.from_xytheta(1.0, -1.0, 0.2))
        graph.add_node(1, Se2.from_xytheta(3.0, 1.0, -0.5))
        measurement = Se2.from_xytheta(1.0, 0.5, 0.3)
        graph.add_odometry_edge(0, 1, measurement, INFO)
        result, report = optimise(graph, PoseGraphOptions(max_iters=2))
        self.assertLessEqual(report.iterations, 2)
        expected = graph.nodes[0] @ measurement
        np.testing.assert_allclose(result.nodes[1].to_vector(), expected.to_vector(), atol=1e-6)

    def test_closure_shrinks_trajectory_error(self):
        graph, truth = noisy_loop()
        open_loop = absolute_trajectory_error(list(graph.nodes.values()), truth)
        result, report = optimise(graph)
        self.assertLessEqual(absolute_trajectory_error(list(result.nodes.values()), truth), 0.2 * open_loop)
        self.assertTrue(report.converged)

    def test_chi2_never_increases(self):
        graph, _ = noisy_loop(seed=4)
        _, report = optimise(graph)
        self.assertTrue(np.all(np.diff(report.history) <= 0))
        self.assertGreaterEqual(report.final_chi2, 0.0)
        self.assertLess(report.final_chi2, report.initial_chi2)

    def test_noise_free_graph_recovers_truth(self):
        truth = circle_poses(30)
        rng = np.random.default_rng(2)
        graph = PoseGraph()
        for k, pose in enumerate(truth):
            jitter = np.zeros(3) if k == 0 else rng.normal(0.0, [0.3, 0.3, 0.05])
            graph.add_node(k, Se2.from_vector(pose.to_vector() + jitter))
        for k in range(29):
            graph.add_odometry_edge(k, k + 1, truth[k].inverse() @ truth[k + 1], INFO)
        graph.add_loop_edge(29, 0, truth[29].inverse() @ truth[0], INFO)
        result, _ = optimise(graph, PoseGraphOptions(max_iters=100))
        for k, pose in enumerate(truth):
            np.testing.assert_allclose(result.nodes[k].as_matrix(), pose.as_matrix(), atol=1e-6)

    def test_gauge_invariance(self):
        graph, _ = noisy_loop(n=40, seed=1)
        G = Se2.from_xytheta(5.0, -3.0, 1.1)
        moved = PoseGraph()
        for node, pose in graph.nodes.items():
            moved.add_node(node, G @ pose)
        for edge in graph.edges:
            if edge.kind == "odometry":
                moved.add_odometry_edge(edge.source, edge.target, edge.measurement, edge.information)
            else:
                moved.add_loop_edge(edge.source, edge.target, edge.measurement, edge.information)
        a, report_a = optimise(graph)
        b, report_b = optimise(moved)
        self.assertAlmostEqual(report_a.final_chi2, report_b.final_chi2, delta=1e-8 * max(1.0, report_a.final_chi2))
        for node in graph.nodes:
            np.testing.assert_allclose((G @ a.nodes[node]).as_matrix(), b.nodes[node].as_matrix(), atol=1e-6)

    def test_information_pulls_toward_its_edge(self):
        def build(scale):
            graph = PoseGraph()
            graph.add_node(0, Se2.identity())
            graph.add_node(1, Se2.from_xytheta(1.0, 0.0, 0.0))
            graph.add_odometry_edge(0, 1, Se2.from_xytheta(1.0, 0.0, 0.0), INFO)
            graph.add_loop_edge(0, 1, Se2.from_xytheta(2.0, 0.0, 0.0), scale * INFO)
            return optimise(graph)[0]

        even, pulled = build(1.0), build(10.0)
        self.assertAlmostEqual(even.nodes[1].x, 1.5, places=6)
        self.assertAlmostEqual(pulled.nodes[1].x, 21.0 / 11.0, places=6)
        share = lambda g: g.edge_chi2(g.loop_edges()[0]) / g.chi2()
        self.assertLess(share(pulled), share(even))

    def test_long_graph_is_factorised_sparse(self):
        graph, _ = noisy_loop(n=3000, seed=5, bias=0.0002, noise=0.0001)
        with mock.patch("pose_graph.services.cholesky", wraps=cholesky) as factorise:
            _, report = optimise(graph, PoseGraphOptions(max_iters=5))
        self.assertLess(report.final_chi2, report.initial_chi2)
        hessian = factorise.call_args.args[0]
        self.assertTrue(sp.issparse(hessian))
        self.assertEqual(hessian.format, "csc")
        self.assertEqual(hessian.shape, (3 * 2999, 3 * 2999))
        # a chain plus one closure: a few 3x3 blocks per row
        self.assertLess(hessian.nnz, 30 * hessian.shape[0])


class StoreTests(SimpleTestCase):
    def test_live_store_reanchors_new_nodes(self):
        store = PoseGraphStore()
        store.add_node(0, Se2.identity())
        store.add_odometry_edge(0, 1, Se2.from_xytheta(1.0, 0.0, 0.0), INFO)
        snapshot = store.snapshot()
        store.add_odometry_edge(1, 2, Se2.from_xytheta(1.0, 0.0, 0.5), INFO)
        snapshot.nodes[1] = Se2.from_xytheta(1.0, 1.0, 0.2)
        store.commit(snapshot)
        expected = Se2.from_xytheta(1.0, 1.0, 0.2) @ Se2.from_xytheta(1.0, 0.0, 0.5)
        np.testing.assert_allclose(store.pose(2).as_matrix(), expected.as_matrix(), atol=1e-12)
        self.assertEqual(store.commits, 1)

    def test_graph_file_round_trip(self):
        graph, _ = noisy_loop(n=12)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "graph.txt"
            write_graph(path, graph)
            loaded = read_graph(path)
        self.assertEqual(len(loaded.edges), len(graph.edges))
        self.assertEqual(len(loaded.loop_edges()), 1)
        self.assertAlmostEqual(loaded.chi2(), graph.chi2(), delta=1e-9 * graph.chi2())
        np.testing.assert_array_equal(loaded.positions(), graph.positions())

    def test_graph_file_errors_name_the_line(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "graph.txt"
            path.write_text("VERTEX 0 0 0 0\nVERTEX 1 1 0 oops\n")
            with self.assertRaises(DataError) as ctx:
                read_graph(path)
        self.assertIn("line 2", str(ctx.exception))
