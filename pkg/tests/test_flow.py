import unittest

import numpy as np

from av_flow import convex_core as cc
from av_flow.diffop import (
    SYMMETRIC_GRADIENT,
    TRACE_CARRYING,
    Grid,
    GridFunction,
    l2_distance,
    operator_spec,
    rigid_motion,
)
from av_flow.energy import DirichletData
from av_flow.flow import (
    evolve,
    merge_time,
    moreau_flow,
    observed_order,
    plateau_rates,
    plateaus,
    qflow,
    qladder,
    step_study,
)
from av_flow.resolvent import SolverConfig
from av_flow.scenarios import resolve_config


def _step(cells: int) -> GridFunction:
    grid = Grid.unit(cells)
    return GridFunction.from_function(grid, lambda x: ((x[..., 0] >= 0.25) & (x[..., 0] <= 0.75)).astype(float))


def _cosine(cells: int) -> GridFunction:
    grid = Grid.unit(cells)
    return GridFunction.from_function(grid, lambda x: np.cos(np.pi * x[..., 0]))


class PlateauTests(unittest.TestCase):
    def test_plateau_split(self) -> None:
        parts = plateaus(_step(32))
        self.assertEqual([(a, b) for a, b, _ in parts], [(0, 8), (8, 25), (25, 33)])
        self.assertEqual([v for _, _, v in parts], [0.0, 1.0, 0.0])

    def test_rates(self) -> None:
        rates = plateau_rates(_step(32))
        h = 1.0 / 32
        self.assertAlmostEqual(rates[0].rate, 1.0 / (8 * h))
        self.assertAlmostEqual(rates[1].rate, -2.0 / (17 * h))
        self.assertAlmostEqual(rates[2].rate, 1.0 / (8 * h))
        self.assertEqual(rates[1].nodes, 17)

    def test_rejects_vector_states(self) -> None:
        grid = Grid.unit(4)
        with self.assertRaises(ValueError):
            plateaus(GridFunction(values=np.zeros((5, 2)), grid=grid))


class TotalVariationFlowTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.u0 = _step(128)
        cls.flow = evolve(cc.WeightedNorm(), cls.u0, 0.002, 75)

    def test_plateaus_move_at_their_rates(self) -> None:
        u = self.flow.states[5]
        for p in plateau_rates(self.u0):
            got = u.values[p.start : p.stop, 0]
            np.testing.assert_allclose(got, p.value + 0.01 * p.rate, atol=1e-9)

    def test_merge_and_final_state(self) -> None:
        self.assertTrue(self.flow.converged)
        t = merge_time(self.flow)
        self.assertIsNotNone(t)
        self.assertAlmostEqual(t, 0.125, delta=1e-2)
        np.testing.assert_allclose(self.flow.final.values, 65.0 / 129.0, atol=1e-9)
        self.assertAlmostEqual(float(self.flow.final.values[0, 0]), 0.5, delta=1e-2)

    def test_mass_and_energy(self) -> None:
        np.testing.assert_allclose(self.flow.masses, self.flow.masses[0], atol=1e-12)
        self.assertEqual(self.flow.energy_violations, [])
        self.assertTrue(np.all(np.diff(self.flow.energies) <= 1e-10))
        self.assertAlmostEqual(self.flow.energies[0], 2.0, places=12)
        self.assertAlmostEqual(self.flow.energies[-1], 0.0, places=9)

    def test_certificates_and_rows(self) -> None:
        self.assertIsNone(self.flow.certificates[0])
        for cert in self.flow.certificates[1:]:
            self.assertTrue(cert.ok())
        rows = self.flow.rows()
        self.assertEqual(len(rows), 76)
        self.assertEqual(rows[3]["step"], 3)
        self.assertAlmostEqual(rows[3]["time"], 0.006)
        self.assertIs(self.flow.state_at(0.0101), self.flow.states[5])

    def test_step_callback(self) -> None:
        seen = []
        evolve(cc.WeightedNorm(), _step(32), 0.01, 3, on_step=lambda k, t, u: seen.append((k, t)))
        self.assertEqual([k for k, _ in seen], [1, 2, 3])

    def test_rejects_bad_steps(self) -> None:
        with self.assertRaises(ValueError):
            evolve(cc.WeightedNorm(), self.u0, 0.0, 3)
        with self.assertRaises(ValueError):
            evolve(cc.WeightedNorm(), self.u0, 0.01, -1)


class SemigroupTests(unittest.TestCase):
    def test_constants_are_stationary(self) -> None:
        grid = Grid.unit(16)
        u0 = GridFunction(values=np.full(17, 0.4), grid=grid)
        for f in (cc.WeightedNorm(), cc.Area()):
            flow = evolve(f, u0, 0.01, 3)
            for u in flow.states:
                np.testing.assert_array_equal(u.values, u0.values)
            self.assertLess(max(flow.energies) - min(flow.energies), 1e-12)

    def test_flows_contract(self) -> None:
        rng = np.random.default_rng(5)
        grid = Grid.unit(32)
        u0 = GridFunction(values=rng.uniform(-1, 1, size=33), grid=grid)
        v0 = GridFunction(values=rng.uniform(-1, 1, size=33), grid=grid)
        a = evolve(cc.Area(), u0, 0.005, 6)
        b = evolve(cc.Area(), v0, 0.005, 6)
        dist = [l2_distance(u, v) for u, v in zip(a.states, b.states)]
        self.assertTrue(np.all(np.diff(dist) <= 1e-6))


class DeformationFlowTests(unittest.TestCase):
    def test_rigid_motions_are_stationary(self) -> None:
        u0 = rigid_motion(Grid.unit((8, 8)), omega=0.5, shift=(0.1, 0.2))
        flow = evolve(cc.WeightedNorm(), u0, 0.01, 2, op=operator_spec(SYMMETRIC_GRADIENT, 2))
        self.assertTrue(flow.converged)
        self.assertLess(l2_distance(flow.final, u0), 1e-10)
        self.assertAlmostEqual(flow.energies[-1], 0.0, places=10)


class SuperlinearFlowTests(unittest.TestCase):
    config = SolverConfig(gap_tol=1e-8, max_iters=50000)

    def test_young_slack_is_non_negative(self) -> None:
        flow = qflow(cc.WeightedNorm(), 1.5, _cosine(16), 0.01, 3, config=self.config)
        self.assertTrue(flow.converged)
        for diag in flow.diagnostics:
            self.assertGreaterEqual(diag["young_slack"], -1e-12)
        self.assertIn("young_slack", flow.rows()[0])

    def test_ladder_approaches_linear_growth(self) -> None:
        base, rows = qladder(cc.WeightedNorm(), [1.5, 1.25], _step(16), 0.01, 0.05, config=self.config)
        self.assertEqual(base.steps, 5)
        self.assertEqual([r.q for r in rows], [1.5, 1.25])
        self.assertTrue(all(r.steps == 5 for r in rows))
        self.assertLess(rows[1].distance, rows[0].distance)

    def test_bundled_ladder_closes_in(self) -> None:
        s, _, _ = resolve_config("qladder-1d")
        base, rows = qladder(s.integrand(), list(s.qs), s.initial_state(), s.dt, s.t_end, config=s.solver)
        self.assertEqual(list(s.qs), [1.5, 1.25, 1.1, 1.05])
        self.assertEqual(base.steps, 10)
        self.assertTrue(all(r.converged for r in rows))
        distances = [r.distance for r in rows]
        self.assertTrue(np.all(np.diff(distances) < 0), msg=str(distances))
        self.assertLess(distances[-1], 0.5 * distances[0])
        for got, seen in zip(distances, (0.2723, 0.1938, 0.0951, 0.0460)):
            self.assertAlmostEqual(got, seen, delta=2e-3)

    def test_moreau_fields_stay_bounded(self) -> None:
        flow = moreau_flow(cc.Area(), 1.25, _cosine(16), 0.01, 3, config=self.config)
        self.assertTrue(flow.converged)
        self.assertEqual(len(flow.smooth_fields), len(flow.states))
        for diag in flow.diagnostics:
            self.assertAlmostEqual(diag["lam"], 0.25)
            self.assertLessEqual(diag["z_sup"], diag["z_bound"])

    def test_quadratic_flow_smooths_the_step(self) -> None:
        flow = qflow(cc.WeightedNorm(), 2.0, _step(16), 0.01, 5, config=self.config)
        self.assertTrue(flow.converged)
        self.assertTrue(np.all(np.diff(flow.energies) < 0))
        self.assertGreater(len(plateaus(flow.final)), 3)
        np.testing.assert_allclose(flow.masses, flow.masses[0], atol=1e-8)

    def test_small_envelope_matches_the_q_flow(self) -> None:
        u0 = _cosine(32)
        plain = qflow(cc.WeightedNorm(), 1.5, u0, 0.01, 3, config=self.config)
        smooth = moreau_flow(cc.WeightedNorm(), 1.5, u0, 0.01, 3, lam=1e-6, config=self.config)
        self.assertTrue(plain.converged and smooth.converged)
        self.assertLess(l2_distance(plain.final, smooth.final), 1e-4)

    def test_dirichlet_needs_an_extension(self) -> None:
        u0 = _cosine(8)
        with self.assertRaises(ValueError):
            qflow(cc.WeightedNorm(), 1.5, u0, 0.01, 1, TRACE_CARRYING, DirichletData(u1=np.zeros(2)))
        shifted = GridFunction(values=u0.values + 1.0, grid=u0.grid)
        mismatched = DirichletData(u1=np.zeros(2), extension=shifted)
        with self.assertRaises(ValueError):
            qflow(cc.WeightedNorm(), 1.5, u0, 0.01, 1, TRACE_CARRYING, mismatched)


class TimeStepTests(unittest.TestCase):
    def test_first_order_in_time(self) -> None:
        u0 = _cosine(32)
        pairs = step_study(lambda dt, steps: evolve(cc.Area(), u0, dt, steps), 0.02, 0.08, halvings=3)
        self.assertEqual([d for d, _ in pairs], [0.02, 0.01, 0.005])
        orders = observed_order(pairs)
        self.assertEqual(len(orders), 2)
        self.assertGreater(orders[-1], 0.6)
        self.assertLess(orders[-1], 1.5)
        ratio = pairs[-2][1] / pairs[-1][1]
        self.assertGreaterEqual(ratio, 1.5)
        self.assertLessEqual(ratio, 2.5)

    def test_observed_order_of_exact_halving(self) -> None:
        self.assertAlmostEqual(observed_order([(0.1, 0.4), (0.05, 0.2)])[0], 1.0)
        self.assertTrue(np.isnan(observed_order([(0.1, 0.0), (0.05, 0.0)])[0]))


if __name__ == "__main__":
    unittest.main()
