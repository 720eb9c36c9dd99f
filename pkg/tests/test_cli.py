import contextlib
import hashlib
import io
import json
import re
import tempfile
import unittest
from concurrent.futures import Future
from concurrent.futures.process import BrokenProcessPool
from pathlib import Path
from unittest import mock

from av_flow import artifacts, cli
from av_flow.cli import ExitCode, _observed_orders, main, report
from av_flow.errors import NonConvergenceError
from av_flow.scenarios import bundled

FLOW = """
schema = 1
name = "tiny-flow"
job = "flow"

[integrand]
id = "euclid"

[grid]
shape = [16]

[flow]
dt = 0.01
steps = 4
"""

ENERGY = """
schema = 1
name = "tiny-energy"
job = "energy"

[integrand]
id = "euclid"

[grid]
shape = [16]

[initial]
profile = "linear"

[boundary]
mode = "dirichlet"
u1 = 0.0
"""

QLADDER = """
schema = 1
name = "tiny-ladder"
job = "qladder"

[integrand]
id = "euclid"

[grid]
shape = [16]

[boundary]
mode = "dirichlet"
u1 = 0.0

[qladder]
qs = [1.5]
dt = 0.01
t_end = 0.02
"""


def _run(argv: list[str]) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


class CliTests(unittest.TestCase):
    def setUp(self) -> None:
        self._td = tempfile.TemporaryDirectory()
        self.root = Path(self._td.name)

    def tearDown(self) -> None:
        self._td.cleanup()

    def _write(self, name: str, text: str) -> Path:
        p = self.root / name
        p.write_text(text, encoding="utf-8")
        return p

    def test_list_and_validate(self) -> None:
        code, out, _ = _run(["list-scenarios"])
        self.assertEqual(code, ExitCode.ok)
        self.assertIn("tvflow-step-1d\tflow\teuclid", out)

        code, out, _ = _run(["validate", str(self._write("flow.toml", FLOW))])
        self.assertEqual(code, ExitCode.ok)
        self.assertIn("ok: tiny-flow (flow)", out)

    def test_invalid_scenario_writes_nothing(self) -> None:
        bad = self._write("bad.toml", FLOW.replace("dt = 0.01", "dt = -0.1"))
        code, _, err = _run(["validate", str(bad)])
        self.assertEqual(code, ExitCode.validation)
        self.assertIn("flow.dt", err)

        out_dir = self.root / "out"
        code, _, err = _run(["run", str(bad), "--out", str(out_dir)])
        self.assertEqual(code, ExitCode.validation)
        self.assertIn("flow.dt", err)
        self.assertFalse(out_dir.exists())

    def test_missing_inputs(self) -> None:
        code, _, _ = _run(["run", str(self.root / "nope.toml")])
        self.assertEqual(code, ExitCode.io)
        code, _, err = _run(["report", str(self.root / "empty")])
        self.assertEqual(code, ExitCode.io)
        self.assertIn("missing metadata", err)

    def test_flow_run_and_report(self) -> None:
        cfg = self._write("flow.toml", FLOW)
        out_dir = self.root / "flow"
        code, out, _ = _run(["run", str(cfg), "--out", str(out_dir)])
        self.assertEqual(code, ExitCode.ok, out)

        meta = artifacts.read_json(out_dir / artifacts.METADATA)
        self.assertEqual(meta["name"], "tiny-flow")
        self.assertEqual(meta["steps"], 4)
        self.assertTrue(meta["converged"])
        self.assertEqual(meta["states"]["shape"], [5, 17, 1])
        states = artifacts.read_states(out_dir / artifacts.STATES, meta["states"])
        self.assertEqual(states.shape, (5, 17, 1))

        rows = artifacts.read_csv(out_dir / artifacts.TRACE)
        self.assertEqual(list(rows[0]), artifacts.TRACE_COLUMNS)
        self.assertEqual(len(rows), 5)
        kinds = [e["kind"] for e in artifacts.read_events(out_dir / artifacts.EVENTS)]
        self.assertEqual(kinds, ["start", "step", "step", "step", "step"])

        code, out, _ = _run(["report", str(out_dir), "--json"])
        self.assertEqual(code, ExitCode.ok)
        summary = json.loads(out)
        self.assertEqual(summary["steps"], 4)
        self.assertTrue(summary["energy_non_increasing"])
        self.assertIn("energy.dat", summary["files"])
        self.assertTrue((out_dir / "energy.dat").read_text(encoding="utf-8").startswith("# time energy"))

    def test_runs_are_deterministic(self) -> None:
        cfg = self._write("flow.toml", FLOW)
        a, b = self.root / "a", self.root / "b"
        self.assertEqual(_run(["run", str(cfg), "--out", str(a)])[0], ExitCode.ok)
        self.assertEqual(_run(["run", str(cfg), "--out", str(b)])[0], ExitCode.ok)
        self.assertEqual((a / artifacts.TRACE).read_bytes(), (b / artifacts.TRACE).read_bytes())
        self.assertEqual((a / artifacts.STATES).read_bytes(), (b / artifacts.STATES).read_bytes())

    def test_dirichlet_energy_run(self) -> None:
        cfg = self._write("energy.toml", ENERGY)
        out_dir = self.root / "energy"
        code, _, _ = _run(["run", str(cfg), "--out", str(out_dir)])
        self.assertEqual(code, ExitCode.ok)
        row = artifacts.read_csv(out_dir / "energy.csv")[0]
        self.assertAlmostEqual(float(row["dual"]), 2.0, places=8)
        self.assertAlmostEqual(float(row["boundary_term"]), 1.0, places=10)

        code, out, _ = _run(["report", str(out_dir)])
        self.assertEqual(code, ExitCode.ok)
        self.assertIn("tiny-energy (energy)", out)

    def test_dirichlet_qladder_without_extension_is_rejected(self) -> None:
        cfg = self._write("ladder.toml", QLADDER)
        code, _, err = _run(["validate", str(cfg)])
        self.assertEqual(code, ExitCode.validation)
        self.assertIn("boundary.u1", err)

        out_dir = self.root / "ladder"
        code, _, err = _run(["run", str(cfg), "--out", str(out_dir)])
        self.assertEqual(code, ExitCode.validation)
        self.assertIn("boundary.u1", err)
        self.assertFalse(out_dir.exists())

    def test_unexpected_failures_become_exit_codes(self) -> None:
        cfg = self._write("flow.toml", FLOW)

        def boom(*_: object) -> bool:
            raise ZeroDivisionError("bad luck")

        with mock.patch.dict(cli._JOBS, {"flow": boom}):
            code, message = cli.run_one(str(cfg), str(self.root / "boom"))
        self.assertEqual(code, ExitCode.error)
        self.assertIn("ZeroDivisionError", message)

        def stuck(*_: object) -> bool:
            raise NonConvergenceError("recession slope did not stabilise")

        with mock.patch.dict(cli._JOBS, {"flow": stuck}):
            code, message = cli.run_one(str(cfg), str(self.root / "stuck"))
        self.assertEqual(code, ExitCode.nonconvergence)
        self.assertIn("did not stabilise", message)

        dead = Future()
        dead.set_exception(BrokenProcessPool("worker exited"))
        code, message = cli._collect("x.toml", dead)
        self.assertEqual(code, ExitCode.error)
        self.assertIn("x.toml", message)
        done = Future()
        done.set_result((ExitCode.ok, "fine"))
        self.assertEqual(cli._collect("y.toml", done), (ExitCode.ok, "fine"))

    def test_out_needs_single_config(self) -> None:
        cfg = str(self._write("flow.toml", FLOW))
        code, _, err = _run(["run", cfg, cfg, "--out", str(self.root / "x")])
        self.assertEqual(code, ExitCode.error)
        self.assertIn("--out", err)


def _shrink(text: str) -> str:
    """A bundled scenario on a grid small enough for the test suite."""

    text = re.sub(r"shape = \[\d+\]", "shape = [16]", text)
    text = re.sub(r"shape = \[\d+, \d+\]", "shape = [4, 4]", text)
    text = re.sub(r"cells = \[[^\]]*\]", "cells = [16, 32]", text)
    text = re.sub(r"steps = \d+", "steps = 2", text)
    return re.sub(r"t_end = [0-9.]+", "t_end = 0.01", text)


class BundledRoundTripTests(unittest.TestCase):
    def test_every_bundled_scenario_runs_and_reports(self) -> None:
        for name, text in bundled().items():
            with self.subTest(name=name), tempfile.TemporaryDirectory() as td:
                cfg = Path(td) / f"{name}.toml"
                cfg.write_text(_shrink(text), encoding="utf-8")
                out_dir = Path(td) / "run"
                code, out, err = _run(["run", str(cfg), "--out", str(out_dir)])
                self.assertEqual(code, ExitCode.ok, err)
                self.assertIn(f"{name}: wrote", out)

                meta = artifacts.read_json(out_dir / artifacts.METADATA)
                self.assertEqual(meta["config_sha256"], hashlib.sha256(cfg.read_bytes()).hexdigest())
                for f in meta["files"]:
                    self.assertTrue((out_dir / f).exists(), f)
                kinds = [e["kind"] for e in artifacts.read_events(out_dir / artifacts.EVENTS)]
                self.assertEqual(kinds[0], "start")

                code, out, _ = _run(["report", str(out_dir), "--json"])
                self.assertEqual(code, ExitCode.ok)
                summary = json.loads(out)
                for key in ("name", "job", "config_sha256", "converged"):
                    self.assertEqual(summary[key], meta[key], key)
                if (out_dir / artifacts.TRACE).exists():
                    rows = artifacts.read_csv(out_dir / artifacts.TRACE)
                    self.assertEqual(summary["steps"], len(rows) - 1)
                    self.assertEqual(summary["final_energy"], float(rows[-1]["energy"]))
                    dat = (out_dir / "energy.dat").read_text(encoding="utf-8").splitlines()
                    self.assertEqual(len([line for line in dat if not line.startswith("#")]), len(rows))


class ReportHelperTests(unittest.TestCase):
    def test_observed_orders(self) -> None:
        orders = _observed_orders([8, 16, 32, 64], [1.0, 1.5, 1.75, 1.875])
        self.assertTrue(all(o != o for o in orders[:1]))
        self.assertAlmostEqual(orders[1], 1.0)
        self.assertAlmostEqual(orders[2], 1.0)
        self.assertTrue(orders[3] != orders[3])

    def test_report_reads_a_handwritten_run(self) -> None:
        with tempfile.TemporaryDirectory() as td:
            d = Path(td)
            artifacts.write_json(d / artifacts.METADATA, artifacts.metadata(name="x", job="qladder", config_sha256="0" * 64))
            artifacts.write_csv(d / "qladder.csv", [{"q": 1.5, "distance": 0.2}, {"q": 1.1, "distance": 0.05}], ["q", "distance"])
            summary = report(d)
            self.assertEqual([r["q"] for r in summary["qladder"]], [1.5, 1.1])
            self.assertTrue((d / "qladder.dat").exists())


if __name__ == "__main__":
    unittest.main()
