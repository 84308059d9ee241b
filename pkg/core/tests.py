import numpy as np
from django.test import SimpleTestCase

from .exceptions import DataError
from .geometry import Se2, rot, se2_apply, se2_compose, se2_inverse, wrap_angle
from .grids import (
    Grid2,
    bilinear_jacobian,
    bilinear_sample,
    bilinear_scatter,
    l2_normalize,
    l2_normalize_backward,
    pix2world,
    world2pix,
)
from .testing import assert_gradient_close, numerical_gradient


def random_se2(rng):
    return Se2.from_xytheta(*rng.uniform(-5, 5, 2), rng.uniform(-np.pi, np.pi))


class PixelWorldTests(SimpleTestCase):
    def test_origin_fixpoint(self):
        grid = Grid2(np.zeros((4, 4)), 0.5, (0.0, 0.0))
        np.testing.assert_array_equal(pix2world((0, 0), grid), [0.0, 0.0])

    def test_affine_evaluation(self):
        grid = Grid2(np.zeros((8, 8)), 0.5, (-1.0, -1.0))
        np.testing.assert_allclose(pix2world((2, 4), grid), [0.0, 1.0])

    def test_inverse_pair(self):
        rng = np.random.default_rng(0)
        grid = Grid2(np.zeros((16, 16)), 0.35, (-2.6, 1.3))
        p = rng.uniform(0, 15, (100, 2))
        np.testing.assert_allclose(world2pix(pix2world(p, grid), grid), p, atol=1e-12)

    def test_centred_grid_puts_sensor_at_centre(self):
        grid = Grid2.centred(np.zeros((5, 5)), 0.7)
        np.testing.assert_allclose(pix2world((2, 2), grid), [0.0, 0.0], atol=1e-15)

    def test_rejects_bad_resolution_and_nan(self):
        with self.assertRaises(DataError):
            Grid2(np.zeros((2, 2)), 0.0, (0, 0))
        with self.assertRaises(DataError):
            Grid2(np.full((2, 2), np.nan), 1.0, (0, 0))


class BilinearSampleTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.data = self.rng.normal(size=(6, 7, 3))

    def test_integer_points_are_exact(self):
        values, clamped = bilinear_sample(self.data, [[2, 3], [6, 5], [0, 0]])
        np.testing.assert_array_equal(values[0], self.data[3, 2])
        np.testing.assert_array_equal(values[1], self.data[5, 6])
        np.testing.assert_array_equal(values[2], self.data[0, 0])
        self.assertFalse(clamped.any())

    def test_midpoint(self):
        data = np.array([[0.0, 1.0]])
        values, _ = bilinear_sample(data, [[0.5, 0.0]])
        self.assertAlmostEqual(values[0, 0], 0.5)

    def test_linear_in_map_values(self):
        other = self.rng.normal(size=self.data.shape)
        p = self.rng.uniform(0, 5, (20, 2))
        lhs = bilinear_sample(2.0 * self.data - 3.0 * other, p).values
        rhs = 2.0 * bilinear_sample(self.data, p).values - 3.0 * bilinear_sample(other, p).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_out_of_bounds_clamps_and_flags(self):
        values, clamped = bilinear_sample(self.data, [[-3.0, 2.0], [10.0, 9.0]])
        np.testing.assert_allclose(values[0], self.data[2, 0])
        np.testing.assert_allclose(values[1], self.data[5, 6])
        self.assertTrue(clamped.all())

    def test_point_gradient_matches_finite_differences(self):
        for p in self.rng.uniform(0.1, 4.9, (10, 2)):
            analytic = bilinear_jacobian(self.data, p[None])[0]
            for c in range(3):
                numeric = numerical_gradient(lambda q: bilinear_sample(self.data, q[None]).values[0, c], p)
                assert_gradient_close(self, analytic[c], numeric, rtol=1e-6)

    def test_scatter_is_the_adjoint(self):
        p = self.rng.uniform(0, 5, (8, 2))
        upstream = self.rng.normal(size=(8, 3))
        grad = bilinear_scatter(self.data.shape, p, upstream)
        numeric = numerical_gradient(lambda d: np.sum(bilinear_sample(d, p).values * upstream), self.data)
        assert_gradient_close(self, grad, numeric, rtol=1e-6)


class NormalizeTests(SimpleTestCase):
    def test_three_four_five(self):
        unit, degenerate = l2_normalize(np.array([3.0, 4.0]))
        np.testing.assert_allclose(unit, [0.6, 0.8])
        self.assertFalse(degenerate)

    def test_idempotent_on_unit_vectors(self):
        v = np.array([0.6, 0.8])
        np.testing.assert_allclose(l2_normalize(v).unit, v)

    def test_zero_vector_is_flagged(self):
        unit, degenerate = l2_normalize(np.zeros(2))
        np.testing.assert_array_equal(unit, [0.0, 0.0])
        self.assertTrue(degenerate)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(4, 5))
        upstream = rng.normal(size=(4, 5))
        analytic = l2_normalize_backward(v, upstream)
        numeric = numerical_gradient(lambda x: np.sum(l2_normalize(x).unit * upstream), v)
        assert_gradient_close(self, analytic, numeric, rtol=1e-6)


class Se2Tests(SimpleTestCase):
    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(3)
        T = random_se2(rng)
        I = se2_compose(T, se2_inverse(T))
        np.testing.assert_allclose(I.rotation, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(I.translation, [0, 0], atol=1e-12)

    def test_identity_apply(self):
        q = np.array([[1.5, -2.0], [0.0, 3.0]])
        np.testing.assert_array_equal(se2_apply(Se2.identity(), q), q)

    def test_associativity(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b, c = (random_se2(rng) for _ in range(3))
            left = (a @ b) @ c
            right = a @ (b @ c)
            np.testing.assert_allclose(left.as_matrix(), right.as_matrix(), atol=1e-12)
            self.assertLess(np.max(np.abs(left.rotation.T @ left.rotation - np.eye(2))), 1e-9)

    def test_rejects_reflections(self):
        with self.assertRaises(DataError):
            Se2(np.diag([1.0, -1.0]), np.zeros(2))

    def test_apply_matches_matrix_form(self):
        T = Se2.from_xytheta(1.0, 2.0, 0.3)
        q = np.array([0.5, -1.0])
        expected = rot(0.3) @ q + [1.0, 2.0]
        np.testing.assert_allclose(T.apply(q), expected)

    def test_wrap_angle_range(self):
        self.assertAlmostEqual(wrap_angle(np.pi), np.pi)
        self.assertAlmostEqual(wrap_angle(-np.pi), np.pi)
        self.assertAlmostEqual(wrap_angle(3 * np.pi / 2), -np.pi / 2)
