from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import Future, ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from av_flow import artifacts
from av_flow.diffop import TRACE_CARRYING, GridFunction
from av_flow.energy import dirichlet_energy, primal_energy, refinement_study, relaxed_energy, relaxed_value
from av_flow.errors import ArtifactError, AvFlowError, NonConvergenceError, ScenarioError
from av_flow.flow import evolve, qladder
from av_flow.resolvent import Resolver
from av_flow.scenarios import Scenario, bundled, load_text, resolve_config

log = logging.getLogger(__name__)

ENERGY_COLUMNS = ["name", "cells", "h", "primal", "relaxed", "dual", "gap", "boundary_term", "direct_dual"]
QLADDER_COLUMNS = ["q", "distance", "steps", "converged"]
REFINEMENT_COLUMNS = ["cells", "h", "primal", "dual", "gap"]


@dataclass(frozen=True)
class ExitCode:
    ok: int = 0
    error: int = 1
    validation: int = 2
    nonconvergence: int = 3
    io: int = 4


def _parse_args(argv: list[str]) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="avflow", description="Relaxed linear-growth energies, resolvents and flows")
    p.add_argument("--verbose", "-v", action="store_true", help="Log solver progress (DEBUG)")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="Run one or more scenarios (TOML files or bundled names)")
    run.add_argument("configs", nargs="+", help="Scenario file(s) or bundled scenario name(s)")
    run.add_argument("--jobs", "-j", type=int, default=1, help="Scenarios to run concurrently (default: 1)")
    run.add_argument("--out", help="Override the scenario's output directory (single scenario only)")

    report = sub.add_parser("report", help="Summarise a run directory and write plot-ready .dat files")
    report.add_argument("dir", help="Directory written by `avflow run`")
    report.add_argument("--json", action="store_true", help="Output the summary as JSON")

    sub.add_parser("list-scenarios", help="List the bundled scenarios")

    validate = sub.add_parser("validate", help="Check a scenario file without running it")
    validate.add_argument("config", help="Scenario file or bundled scenario name")

    return p.parse_args(argv)


def _emit_json(obj: Any) -> None:
    json.dump(artifacts.jsonable(obj), sys.stdout, indent=2, sort_keys=False)
    sys.stdout.write("\n")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _meta(scenario: Scenario, digest: str, source: str, u0: GridFunction, **fields: Any) -> dict[str, Any]:
    op = scenario.operator()
    return artifacts.metadata(
        name=scenario.name,
        job=scenario.job,
        source=source,
        config_sha256=digest,
        seed=scenario.seed,
        integrand=scenario.integrand_id,
        operator={"kind": op.kind, "m": op.m, "n": op.n},
        grid=u0.grid.to_json(),
        boundary=scenario.boundary,
        solver={
            "max_iters": scenario.solver.max_iters,
            "gap_tol": scenario.solver.gap_tol,
            "residual_tol": scenario.solver.residual_tol,
            "check_every": scenario.solver.check_every,
            "polish": scenario.solver.polish,
        },
        **fields,
    )


def _run_energy(scenario: Scenario, out: Path, digest: str, source: str) -> bool:
    f, op, u0 = scenario.integrand(), scenario.operator(), scenario.initial_state()
    if scenario.boundary == TRACE_CARRYING:
        report = dirichlet_energy(f, u0, scenario.dirichlet(u0), op=op)
    else:
        report = relaxed_energy(f, u0, op=op)
    row = {
        "name": scenario.name,
        "cells": u0.grid.cell_count,
        "h": u0.grid.h,
        "primal": primal_energy(f, u0, op=op),
        "relaxed": report.primal,
        "dual": report.dual,
        "gap": report.gap,
        "boundary_term": report.boundary_term,
        "direct_dual": report.direct_dual if report.direct_dual is not None else "",
    }
    artifacts.write_csv(out / "energy.csv", [row], ENERGY_COLUMNS)
    artifacts.append_event(out, {"kind": "energy", **report.to_json()})
    artifacts.write_json(
        out / artifacts.METADATA,
        _meta(scenario, digest, source, u0, converged=report.converged, files=["energy.csv"]),
    )
    return report.converged


def _run_resolvent(scenario: Scenario, out: Path, digest: str, source: str) -> bool:
    f, op, w = scenario.integrand(), scenario.operator(), scenario.initial_state()
    resolver = Resolver(f, op, w.grid, scenario.lam, scenario.boundary, scenario.dirichlet(w), scenario.solver)
    res = resolver.solve(w)
    rows = [
        {"step": 0, "time": 0.0, "energy": relaxed_value(resolver.cells, w, resolver.dirichlet), "mass": float(w.mass().sum())},
        {"step": 1, "time": scenario.lam, "energy": res.energy, "mass": float(res.u.mass().sum()), **res.certificate.to_json()},
    ]
    artifacts.write_csv(out / artifacts.TRACE, rows, artifacts.TRACE_COLUMNS)
    layout = artifacts.write_states(out / artifacts.STATES, [w, res.u])
    artifacts.append_event(
        out,
        {"kind": "resolvent", "iterations": res.iterations, "converged": res.converged, **res.certificate.to_json()},
    )
    artifacts.write_json(
        out / artifacts.METADATA,
        _meta(scenario, digest, source, w, lam=scenario.lam, converged=res.converged, states=layout, files=[artifacts.TRACE, artifacts.STATES]),
    )
    return res.converged


def _run_flow(scenario: Scenario, out: Path, digest: str, source: str) -> bool:
    f, op, u0 = scenario.integrand(), scenario.operator(), scenario.initial_state()

    def on_step(k: int, t: float, u: GridFunction) -> None:
        artifacts.append_event(out, {"kind": "step", "step": k, "time": t, "mass": float(u.mass().sum())})

    trace = evolve(
        f,
        u0,
        scenario.dt,
        scenario.steps,
        scenario.boundary,
        scenario.dirichlet(u0),
        op=op,
        config=scenario.solver,
        on_step=on_step,
    )
    artifacts.write_csv(out / artifacts.TRACE, trace.rows(), artifacts.TRACE_COLUMNS)
    layout = artifacts.write_states(out / artifacts.STATES, trace.states)
    artifacts.write_json(
        out / artifacts.METADATA,
        _meta(
            scenario,
            digest,
            source,
            u0,
            dt=scenario.dt,
            steps=trace.steps,
            requested_steps=scenario.steps,
            converged=trace.converged,
            energy_violations=trace.energy_violations,
            states=layout,
            files=[artifacts.TRACE, artifacts.STATES],
        ),
    )
    return trace.converged


def _run_qladder(scenario: Scenario, out: Path, digest: str, source: str) -> bool:
    f, op, u0 = scenario.integrand(), scenario.operator(), scenario.initial_state()
    base, rows = qladder(
        f,
        list(scenario.qs),
        u0,
        scenario.dt,
        scenario.t_end,
        scenario.boundary,
        scenario.dirichlet(u0),
        op=op,
        config=scenario.solver,
        moreau=scenario.moreau,
    )
    artifacts.write_csv(
        out / "qladder.csv",
        [{"q": r.q, "distance": r.distance, "steps": r.steps, "converged": r.converged} for r in rows],
        QLADDER_COLUMNS,
    )
    artifacts.write_csv(out / artifacts.TRACE, base.rows(), artifacts.TRACE_COLUMNS)
    converged = base.converged and all(r.converged for r in rows)
    for r in rows:
        artifacts.append_event(out, {"kind": "qladder", "q": r.q, "distance": r.distance, "converged": r.converged})
    artifacts.write_json(
        out / artifacts.METADATA,
        _meta(
            scenario,
            digest,
            source,
            u0,
            dt=scenario.dt,
            t_end=scenario.t_end,
            qs=list(scenario.qs),
            moreau=scenario.moreau,
            converged=converged,
            files=["qladder.csv", artifacts.TRACE],
        ),
    )
    return converged


def _run_refinement(scenario: Scenario, out: Path, digest: str, source: str) -> bool:
    f = scenario.integrand()
    m = scenario.operator().m
    rows = refinement_study(
        f,
        lambda grid: scenario.initial.build(grid, m, scenario.seed),
        list(scenario.refinement_cells),
        kind=scenario.operator_kind,
    )
    artifacts.write_csv(
        out / "refinement.csv",
        [{"cells": r.cells, "h": r.h, "primal": r.primal, "dual": r.dual, "gap": r.gap} for r in rows],
        REFINEMENT_COLUMNS,
    )
    for r in rows:
        artifacts.append_event(out, {"kind": "refinement", "cells": r.cells, "primal": r.primal, "dual": r.dual})
    artifacts.write_json(
        out / artifacts.METADATA,
        _meta(
            scenario,
            digest,
            source,
            scenario.initial_state(),
            cells=list(scenario.refinement_cells),
            converged=True,
            files=["refinement.csv"],
        ),
    )
    return True


_JOBS = {
    "energy": _run_energy,
    "resolvent": _run_resolvent,
    "flow": _run_flow,
    "qladder": _run_qladder,
    "refinement-study": _run_refinement,
}


def run_one(ref: str, out_override: str | None = None) -> tuple[int, str]:
    """Run a single scenario. Returns (exit code, message); never raises."""

    try:
        scenario, digest, source = resolve_config(ref)
    except ScenarioError as e:
        return ExitCode.validation, f"{ref}: {e}"
    except (OSError, UnicodeDecodeError) as e:
        return ExitCode.io, f"{ref}: {e}"

    out = Path(out_override) if out_override else scenario.resolved_output_dir()
    try:
        # Inputs are built once up front so a bad scenario leaves no run directory.
        scenario.dirichlet(scenario.initial_state())
    except (AvFlowError, ValueError) as e:
        return ExitCode.validation, f"{ref}: {e}"

    try:
        artifacts.prepare_run_dir(out)
        artifacts.append_event(out, {"kind": "start", "name": scenario.name, "config_sha256": digest})
        converged = _JOBS[scenario.job](scenario, out, digest, source)
    except ScenarioError as e:
        return ExitCode.validation, f"{ref}: {e}"
    except NonConvergenceError as e:
        return ExitCode.nonconvergence, f"{ref}: {e}"
    except (ArtifactError, OSError) as e:
        return ExitCode.io, f"{ref}: {e}"
    except AvFlowError as e:
        return ExitCode.error, f"{ref}: {e}"
    except Exception as e:
        log.debug("scenario %s failed", ref, exc_info=True)
        return ExitCode.error, f"{ref}: {type(e).__name__}: {e}"

    if not converged:
        return ExitCode.nonconvergence, f"{scenario.name}: solver did not converge; partial artifacts in {out}"
    return ExitCode.ok, f"{scenario.name}: wrote {out}"


def _collect(ref: str, future: Future[tuple[int, str]]) -> tuple[int, str]:
    """Result of a pooled run; a worker that died still yields a row."""

    try:
        return future.result()
    except Exception as e:
        return ExitCode.error, f"{ref}: worker failed: {type(e).__name__}: {e}"


def _observed_orders(cells: list[int], values: list[float]) -> list[float]:
    """log(d_{k-1}/d_k)/log(N_k/N_{k-1}) with d_k = |v_{k+1} - v_k|; nan where undefined."""

    diffs = [abs(b - a) for a, b in zip(values, values[1:])]
    out = [math.nan] * len(values)
    for k in range(1, len(diffs)):
        if diffs[k - 1] > 0 and diffs[k] > 0 and cells[k] != cells[k - 1]:
            out[k] = math.log(diffs[k - 1] / diffs[k]) / math.log(cells[k] / cells[k - 1])
    return out


def _float(value: str) -> float:
    return float(value) if value not in ("", None) else math.nan


def report(run_dir: Path) -> dict[str, Any]:
    meta_path = run_dir / artifacts.METADATA
    if not meta_path.exists():
        raise ArtifactError(str(meta_path), "missing metadata")
    meta = artifacts.read_json(meta_path)
    for key in ("name", "job", "config_sha256"):
        if key not in meta:
            raise ArtifactError(str(meta_path), f"corrupt metadata: no {key!r}")
    summary: dict[str, Any] = {
        "name": meta["name"],
        "job": meta["job"],
        "config_sha256": meta["config_sha256"],
        "converged": meta.get("converged"),
        "files": [],
    }

    trace_path = run_dir / artifacts.TRACE
    if trace_path.exists():
        rows = artifacts.read_csv(trace_path)
        energies = [_float(r["energy"]) for r in rows]
        artifacts.write_dat(
            run_dir / "energy.dat",
            ["time", "energy", "mass", "fenchel_gap"],
            [[_float(r["time"]), _float(r["energy"]), _float(r["mass"]), _float(r["fenchel_gap"])] for r in rows],
        )
        summary["files"].append("energy.dat")
        summary["steps"] = len(rows) - 1
        summary["final_energy"] = energies[-1] if energies else None
        summary["energy_non_increasing"] = all(b <= a + 1e-8 * (1 + abs(a)) for a, b in zip(energies, energies[1:]))

    ladder_path = run_dir / "qladder.csv"
    if ladder_path.exists():
        rows = artifacts.read_csv(ladder_path)
        artifacts.write_dat(run_dir / "qladder.dat", ["q", "distance"], [[_float(r["q"]), _float(r["distance"])] for r in rows])
        summary["files"].append("qladder.dat")
        summary["qladder"] = [{"q": _float(r["q"]), "distance": _float(r["distance"])} for r in rows]

    refine_path = run_dir / "refinement.csv"
    if refine_path.exists():
        rows = artifacts.read_csv(refine_path)
        cells = [int(r["cells"]) for r in rows]
        duals = [_float(r["dual"]) for r in rows]
        orders = _observed_orders(cells, duals)
        artifacts.write_dat(
            run_dir / "refinement.dat",
            ["cells", "dual", "primal", "gap", "order"],
            [[c, d, _float(r["primal"]), _float(r["gap"]), o] for c, d, r, o in zip(cells, duals, rows, orders)],
        )
        summary["files"].append("refinement.dat")
        summary["refinement"] = [{"cells": c, "dual": d} for c, d in zip(cells, duals)]

    energy_path = run_dir / "energy.csv"
    if energy_path.exists():
        summary["energy"] = {k: v for k, v in artifacts.read_csv(energy_path)[0].items()}

    return summary


def _emit_text(summary: dict[str, Any]) -> None:
    print(f"{summary['name']} ({summary['job']})")
    print(f"config: {summary['config_sha256']}")
    print(f"converged: {summary.get('converged')}")
    if "final_energy" in summary:
        print(f"steps: {summary['steps']}  final energy: {summary['final_energy']:.12g}")
    for row in summary.get("qladder", []):
        print(f"q={row['q']:g}  distance={row['distance']:.6g}")
    for row in summary.get("refinement", []):
        print(f"cells={row['cells']}  dual={row['dual']:.12g}")
    if "energy" in summary:
        e = summary["energy"]
        print(f"primal={e['primal']}  dual={e['dual']}  gap={e['gap']}")
    for name in summary["files"]:
        print(f"wrote {name}")


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(sys.argv[1:] if argv is None else argv)
    _setup_logging(args.verbose)

    try:
        if args.cmd == "list-scenarios":
            for name, text in bundled().items():
                scenario = load_text(text)
                print(f"{name}\t{scenario.job}\t{scenario.integrand_id}")
            return ExitCode.ok

        if args.cmd == "validate":
            scenario, digest, _ = resolve_config(args.config)
            print(f"ok: {scenario.name} ({scenario.job}) sha256={digest}")
            return ExitCode.ok

        if args.cmd == "run":
            if args.out and len(args.configs) > 1:
                raise ValueError("--out only applies to a single scenario")
            if args.jobs > 1 and len(args.configs) > 1:
                with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                    futures = [pool.submit(run_one, ref) for ref in args.configs]
                    results = [_collect(ref, fut) for ref, fut in zip(args.configs, futures)]
            else:
                results = [run_one(ref, args.out) for ref in args.configs]
            worst = ExitCode.ok
            for code, message in results:
                print(message, file=sys.stdout if code == ExitCode.ok else sys.stderr)
                worst = max(worst, code)
            return worst

        if args.cmd == "report":
            summary = report(Path(args.dir))
            if args.json:
                _emit_json(summary)
            else:
                _emit_text(summary)
            return ExitCode.ok

        raise ValueError(f"Unknown command: {args.cmd}")
    except KeyboardInterrupt:
        return ExitCode.error
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return ExitCode.validation
    except (ArtifactError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return ExitCode.io
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return ExitCode.error
