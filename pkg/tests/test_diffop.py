import unittest

import numpy as np

from av_flow.diffop import (
    DIVERGENCE,
    FULL_GRADIENT,
    NEUMANN,
    SYMMETRIC_GRADIENT,
    TRACE_CARRYING,
    DualField,
    Grid,
    GridFunction,
    OperatorSpec,
    adjoint_div,
    apply,
    boundary_faces,
    boundary_pairing,
    green_defect,
    l2_distance,
    lipschitz_estimate,
    operator_norm,
    operator_spec,
    rigid_motion,
    schur_bound,
    stencil,
    trace,
)
from av_flow.errors import DimensionError, OperatorError


def _random_pair(op, grid, rng, *, with_boundary=False):
    u = GridFunction(values=rng.normal(size=grid.node_shape + (op.m,)), grid=grid)
    b = rng.normal(size=(boundary_faces(grid).count, op.m, op.n)) if with_boundary else None
    z = DualField.projected(op, rng.normal(size=grid.dual_shape + (op.m, op.n)), grid, b)
    return u, z


class OperatorSpecTests(unittest.TestCase):
    def test_projections(self) -> None:
        self.assertTrue(np.array_equal(operator_spec(FULL_GRADIENT, 2, 3).A, np.eye(6)))
        sym = operator_spec(SYMMETRIC_GRADIENT, 2).A
        np.testing.assert_allclose(sym @ sym, sym)
        self.assertAlmostEqual(float(np.trace(sym)), 3.0)
        self.assertAlmostEqual(float(np.trace(operator_spec(DIVERGENCE, 2).A)), 1.0)

    def test_c_ellipticity(self) -> None:
        self.assertTrue(operator_spec(FULL_GRADIENT, 2).c_elliptic)
        self.assertTrue(operator_spec(SYMMETRIC_GRADIENT, 2).c_elliptic)
        self.assertTrue(operator_spec(DIVERGENCE, 1).c_elliptic)
        self.assertFalse(operator_spec(DIVERGENCE, 2).c_elliptic)

    def test_rejects_bad_input(self) -> None:
        with self.assertRaises(OperatorError):
            operator_spec("curl", 2)
        with self.assertRaises(DimensionError):
            operator_spec(FULL_GRADIENT, 3)
        with self.assertRaises(DimensionError):
            operator_spec(SYMMETRIC_GRADIENT, 2, 1)
        with self.assertRaises(OperatorError):
            OperatorSpec(kind="bogus", m=1, n=2, A=np.array([[1.0, 1.0], [0.0, 1.0]]))


class GridTests(unittest.TestCase):
    def test_geometry(self) -> None:
        g = Grid.unit((16, 16))
        self.assertEqual(g.node_shape, (17, 17))
        self.assertEqual(g.cell_count, 256)
        self.assertAlmostEqual(g.volume, 1.0)
        self.assertAlmostEqual(g.face_measure, 1.0 / 16)
        self.assertEqual(boundary_faces(g).count, 64)
        self.assertEqual(boundary_faces(Grid.unit(8)).count, 2)

    def test_dual_cells(self) -> None:
        g = Grid.unit((16, 16))
        self.assertEqual(g.dual_shape, (16, 16, 2))
        self.assertEqual(g.dual_count, 512)
        self.assertAlmostEqual(g.dual_count * g.dual_volume, g.volume)
        self.assertEqual(g.dual_points().shape, (16, 16, 2, 2))
        line = Grid.unit(8)
        self.assertEqual(line.dual_shape, (8,))
        self.assertEqual(line.dual_weight, 1.0)
        np.testing.assert_allclose(line.dual_points(), line.cell_centres())

    def test_faces_touch_their_dual_cells(self) -> None:
        g = Grid.unit((5, 4))
        faces = boundary_faces(g)
        centres = g.dual_points().reshape(-1, 2)[faces.cell]
        # a barycentre sits h/3 from its boundary edge and within h of the edge midpoint
        gap = np.abs(np.einsum("fd,fd->f", centres - faces.points, faces.normals))
        np.testing.assert_allclose(gap, g.h / 3.0)
        self.assertTrue(np.all(np.linalg.norm(centres - faces.points, axis=1) < g.h))

    def test_rejects_bad_grids(self) -> None:
        with self.assertRaises(DimensionError):
            Grid(shape=(2, 2, 2), h=0.5)
        with self.assertRaises(DimensionError):
            Grid(shape=(4,), h=0.0)

    def test_grid_function_is_frozen(self) -> None:
        u = GridFunction.from_function(Grid.unit(4), lambda x: x[..., 0])
        self.assertEqual(u.m, 1)
        with self.assertRaises(ValueError):
            u.values[0, 0] = 1.0
        with self.assertRaises(ValueError):
            GridFunction(values=np.full(5, np.nan), grid=Grid.unit(4))
        with self.assertRaises(DimensionError):
            GridFunction(values=np.zeros(4), grid=Grid.unit(4))

    def test_mass_and_distance(self) -> None:
        g = Grid.unit(10)
        one = GridFunction(values=np.ones(11), grid=g)
        zero = GridFunction(values=np.zeros(11), grid=g)
        np.testing.assert_allclose(one.mass(), [1.1])
        self.assertAlmostEqual(l2_distance(one, zero), np.sqrt(1.1))


class ApplyTests(unittest.TestCase):
    def test_hat_function(self) -> None:
        g = Grid.unit(2)
        u = GridFunction(values=[0.0, 1.0, 0.0], grid=g)
        Y = apply(operator_spec(FULL_GRADIENT, 1), u)
        np.testing.assert_allclose(Y.values.ravel(), [2.0, -2.0])

    def test_linear_functions_are_exact(self) -> None:
        g = Grid.unit((6, 5))
        u = GridFunction.from_function(g, lambda x: 2.0 * x[..., 0] - 3.0 * x[..., 1])
        Y = apply(operator_spec(FULL_GRADIENT, 2), u)
        np.testing.assert_allclose(Y.values[..., 0, 0], 2.0)
        np.testing.assert_allclose(Y.values[..., 0, 1], -3.0)

    def test_rigid_motion_in_kernel_of_symmetric_gradient(self) -> None:
        g = Grid.unit((8, 8))
        u = rigid_motion(g, omega=1.7, shift=(0.3, -2.0))
        Y = apply(operator_spec(SYMMETRIC_GRADIENT, 2), u)
        self.assertLess(float(np.max(np.abs(Y.values))), 1e-12)
        full = apply(operator_spec(FULL_GRADIENT, 2, 2), u)
        self.assertGreater(float(np.max(np.abs(full.values))), 1.0)

    def test_kernel_of_full_gradient_is_the_constants(self) -> None:
        g = Grid.unit((4, 4))
        K = stencil(operator_spec(FULL_GRADIENT, 2), g).toarray()
        self.assertEqual(np.linalg.matrix_rank(K), g.node_count - 1)
        vector = stencil(operator_spec(FULL_GRADIENT, 2, 2), g).toarray()
        self.assertEqual(np.linalg.matrix_rank(vector), 2 * g.node_count - 2)

    def test_kernel_of_symmetric_gradient_is_the_rigid_motions(self) -> None:
        g = Grid.unit((4, 4))
        K = stencil(operator_spec(SYMMETRIC_GRADIENT, 2), g).toarray()
        self.assertEqual(np.linalg.matrix_rank(K), 2 * g.node_count - 3)

    def test_checkerboard_is_seen(self) -> None:
        g = Grid.unit((8, 8))
        i, j = np.meshgrid(np.arange(9), np.arange(9), indexing="ij")
        u = GridFunction(values=(-1.0) ** (i + j), grid=g)
        Y = apply(operator_spec(FULL_GRADIENT, 2), u)
        # every triangle has one edge along each axis joining opposite signs
        np.testing.assert_allclose(np.abs(Y.values), 2.0 / g.h)
        v = GridFunction(values=np.stack([(-1.0) ** (i + j), np.zeros((9, 9))], axis=-1), grid=g)
        S = apply(operator_spec(SYMMETRIC_GRADIENT, 2), v)
        self.assertGreater(float(np.min(np.abs(S.values[..., 0, 0]))), 1.0 / g.h)

    def test_dimension_mismatch(self) -> None:
        u = GridFunction(values=np.zeros(5), grid=Grid.unit(4))
        with self.assertRaises(DimensionError):
            apply(operator_spec(FULL_GRADIENT, 1, 2), u)
        with self.assertRaises(DimensionError):
            stencil(operator_spec(FULL_GRADIENT, 2), Grid.unit(4))


class GreenIdentityTests(unittest.TestCase):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(5)

    def test_neumann(self) -> None:
        cases = [
            (operator_spec(FULL_GRADIENT, 1), Grid.unit(64)),
            (operator_spec(FULL_GRADIENT, 2), Grid.unit((16, 16))),
            (operator_spec(SYMMETRIC_GRADIENT, 2), Grid.unit((16, 16))),
            (operator_spec(DIVERGENCE, 2), Grid.unit((16, 16))),
        ]
        for op, grid in cases:
            for _ in range(100):
                u, z = _random_pair(op, grid, self.rng)
                self.assertLess(green_defect(op, u, z, NEUMANN), 1e-10, msg=op.kind)

    def test_trace_carrying(self) -> None:
        cases = [
            (operator_spec(FULL_GRADIENT, 1), Grid.unit(64)),
            (operator_spec(FULL_GRADIENT, 2, 2), Grid.unit((16, 16))),
            (operator_spec(SYMMETRIC_GRADIENT, 2), Grid.unit((16, 16))),
        ]
        for op, grid in cases:
            for _ in range(100):
                u, z = _random_pair(op, grid, self.rng, with_boundary=True)
                self.assertLess(green_defect(op, u, z, TRACE_CARRYING), 1e-10, msg=op.kind)

    def test_boundary_pairing_in_1d(self) -> None:
        op = operator_spec(FULL_GRADIENT, 1)
        grid = Grid.unit(4)
        z = DualField(values=np.zeros((4, 1, 1)), grid=grid, boundary=[[[0.7]], [[-0.3]]])
        # z(1) b - z(0) a with a = 2 at x = 0 and b = 5 at x = 1
        self.assertAlmostEqual(boundary_pairing(op, z, np.array([[2.0], [5.0]])), -0.3 * 5.0 - 0.7 * 2.0, places=14)
        flat = DualField(values=np.zeros((4, 1, 1)), grid=grid, boundary=np.full((2, 1, 1), 1.5))
        self.assertAlmostEqual(boundary_pairing(op, flat, np.array([[2.0], [5.0]])), 1.5 * (5.0 - 2.0), places=14)
        self.assertEqual(boundary_pairing(op, DualField.zeros(op, grid), np.array([[2.0], [5.0]])), 0.0)

    def test_pairing_against_the_trace_of_a_ramp(self) -> None:
        op = operator_spec(FULL_GRADIENT, 1)
        grid = Grid.unit(8)
        u = GridFunction.from_function(grid, lambda x: 3.0 + 2.0 * x[..., 0])
        z = DualField(values=np.zeros((8, 1, 1)), grid=grid, boundary=[[[0.5]], [[0.25]]])
        self.assertAlmostEqual(boundary_pairing(op, z, trace(u)), 0.25 * 5.0 - 0.5 * 3.0, places=14)

    def test_divergence_has_no_trace_in_2d(self) -> None:
        op = operator_spec(DIVERGENCE, 2)
        grid = Grid.unit((4, 4))
        z = DualField.zeros(op, grid, with_boundary=True)
        with self.assertRaises(OperatorError):
            adjoint_div(op, z, TRACE_CARRYING)

    def test_trace_of_linear_function(self) -> None:
        g = Grid.unit(8)
        u = GridFunction.from_function(g, lambda x: x[..., 0])
        np.testing.assert_allclose(trace(u).ravel(), [0.0, 1.0])


class NormTests(unittest.TestCase):
    def test_operator_norm_bounds(self) -> None:
        op = operator_spec(FULL_GRADIENT, 1)
        g = Grid.unit(64)
        K = stencil(op, g)
        est = lipschitz_estimate(K)
        self.assertLessEqual(est, schur_bound(K) * (1 + 1e-12))
        norm = operator_norm(op, g)
        self.assertLessEqual(norm, 2.0 / g.h)
        self.assertGreater(norm, 1.8 / g.h)


if __name__ == "__main__":
    unittest.main()
