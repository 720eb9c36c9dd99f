from __future__ import annotations

import hashlib
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 fallback (same API)
    import tomli as tomllib

import numpy as np

from av_flow.convex_core import Integrand, parse_integrand
from av_flow.diffop import (
    NEUMANN,
    OPERATOR_KINDS,
    TRACE_CARRYING,
    Grid,
    GridFunction,
    OperatorSpec,
    boundary_faces,
    operator_spec,
)
from av_flow.energy import DirichletData
from av_flow.errors import AvFlowError, ScenarioError
from av_flow.resolvent import SolverConfig

SCHEMA = 1
OUTPUT_ROOT_ENV = "AVFLOW_OUTPUT_ROOT"

JOBS = ("energy", "resolvent", "flow", "qladder", "refinement-study")
PROFILES = ("step", "linear", "constant", "rotation", "cosine", "random")
BOUNDARY_MODES = {"neumann": NEUMANN, "dirichlet": TRACE_CARRYING}

_TOP_KEYS = {
    "schema",
    "name",
    "job",
    "seed",
    "output_dir",
    "operator",
    "integrand",
    "grid",
    "boundary",
    "initial",
    "flow",
    "resolvent",
    "qladder",
    "refinement",
    "solver",
}


def _table(raw: dict[str, Any], key: str, *, required: bool = False) -> dict[str, Any]:
    value = raw.get(key)
    if value is None:
        if required:
            raise ScenarioError(key, "missing table")
        return {}
    if not isinstance(value, dict):
        raise ScenarioError(key, "must be a table")
    return value


def _number(table: dict[str, Any], key: str, path: str, default: Any = None, *, positive: bool = False) -> float:
    value = table.get(key, default)
    if value is None:
        raise ScenarioError(_join(path, key), "missing value")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(_join(path, key), f"expected a number, got {value!r}")
    if positive and not value > 0:
        raise ScenarioError(_join(path, key), f"must be positive, got {value}")
    return float(value)


def _integer(table: dict[str, Any], key: str, path: str, default: Any = None, *, minimum: int = 0) -> int:
    value = table.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(_join(path, key), f"expected an integer, got {value!r}")
    if value < minimum:
        raise ScenarioError(_join(path, key), f"must be at least {minimum}, got {value}")
    return value


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _unknown(table: dict[str, Any], allowed: set[str], path: str) -> None:
    extra = sorted(set(table) - allowed)
    if extra:
        raise ScenarioError(_join(path, extra[0]), "unknown key")


@dataclass(frozen=True)
class InitialProfile:
    profile: str
    value: float = 0.0
    interval: tuple[float, float] = (0.25, 0.75)
    amplitude: float = 1.0

    @staticmethod
    def from_raw(raw: dict[str, Any]) -> InitialProfile:
        _unknown(raw, {"profile", "value", "interval", "amplitude"}, "initial")
        profile = str(raw.get("profile", "step"))
        if profile not in PROFILES:
            raise ScenarioError("initial.profile", f"expected one of {', '.join(PROFILES)}, got {profile!r}")
        interval = raw.get("interval", [0.25, 0.75])
        if not (isinstance(interval, list) and len(interval) == 2 and interval[0] < interval[1]):
            raise ScenarioError("initial.interval", "expected [a, b] with a < b")
        return InitialProfile(
            profile=profile,
            value=_number(raw, "value", "initial", 0.0),
            interval=(float(interval[0]), float(interval[1])),
            amplitude=_number(raw, "amplitude", "initial", 1.0),
        )

    def build(self, grid: Grid, m: int, seed: int) -> GridFunction:
        x = grid.node_coords()
        shape = grid.node_shape + (m,)
        if self.profile == "step":
            a, b = self.interval
            base = ((x[..., 0] >= a - 1e-12) & (x[..., 0] <= b + 1e-12)).astype(float)
            values = np.repeat(base[..., None], m, axis=-1)
        elif self.profile == "linear":
            values = np.repeat(x[..., :1], m, axis=-1)
        elif self.profile == "constant":
            values = np.full(shape, self.value)
        elif self.profile == "cosine":
            values = np.repeat(np.cos(np.pi * x[..., :1]), m, axis=-1)
        elif self.profile == "rotation":
            if grid.n != 2 or m != 2:
                raise ScenarioError("initial.profile", "rotation needs a 2D grid and m = 2")
            values = np.stack([-x[..., 1], x[..., 0]], axis=-1)
        else:
            values = np.random.default_rng(seed).uniform(-self.amplitude, self.amplitude, size=shape)
        return GridFunction(values=values, grid=grid)


@dataclass(frozen=True)
class Scenario:
    name: str
    job: str
    seed: int
    integrand_id: str
    operator_kind: str
    operator_m: int | None
    grid_shape: tuple[int, ...]
    grid_h: float
    boundary: str
    u1: str | list[float] | None
    initial: InitialProfile
    solver: SolverConfig
    output_dir: str
    dt: float | None = None
    steps: int | None = None
    lam: float | None = None
    qs: tuple[float, ...] = ()
    t_end: float | None = None
    moreau: bool = False
    refinement_cells: tuple[int, ...] = ()
    raw: dict[str, Any] = field(default_factory=dict, compare=False)

    @staticmethod
    def from_raw(raw: dict[str, Any]) -> Scenario:
        if not isinstance(raw, dict):
            raise ScenarioError("<root>", "scenario must be a TOML table")
        _unknown(raw, _TOP_KEYS, "")
        schema = raw.get("schema", SCHEMA)
        if schema != SCHEMA:
            raise ScenarioError("schema", f"unsupported schema {schema!r}")
        name = raw.get("name")
        if not isinstance(name, str) or not name.strip():
            raise ScenarioError("name", "missing scenario name")
        job = raw.get("job")
        if job not in JOBS:
            raise ScenarioError("job", f"expected one of {', '.join(JOBS)}, got {job!r}")
        seed = _integer(raw, "seed", "", 0) if "seed" in raw else 0

        op_t = _table(raw, "operator")
        _unknown(op_t, {"kind", "m"}, "operator")
        kind = str(op_t.get("kind", "full-gradient"))
        if kind not in OPERATOR_KINDS:
            raise ScenarioError("operator.kind", f"expected one of {', '.join(OPERATOR_KINDS)}, got {kind!r}")
        op_m = _integer(op_t, "m", "operator", minimum=1) if "m" in op_t else None

        f_t = _table(raw, "integrand", required=True)
        _unknown(f_t, {"id"}, "integrand")
        ident = f_t.get("id")
        if not isinstance(ident, str):
            raise ScenarioError("integrand.id", "missing integrand id")
        try:
            parse_integrand(ident)
        except ValueError as e:
            raise ScenarioError("integrand.id", str(e)) from e

        g_t = _table(raw, "grid", required=True)
        _unknown(g_t, {"shape", "h"}, "grid")
        shape_raw = g_t.get("shape")
        shape = [shape_raw] if isinstance(shape_raw, int) and not isinstance(shape_raw, bool) else shape_raw
        if not (isinstance(shape, list) and 1 <= len(shape) <= 2 and all(isinstance(s, int) and s >= 1 for s in shape)):
            raise ScenarioError("grid.shape", "expected one or two positive cell counts")
        h = _number(g_t, "h", "grid", 1.0 / shape[0], positive=True)

        b_t = _table(raw, "boundary")
        _unknown(b_t, {"mode", "u1"}, "boundary")
        mode = str(b_t.get("mode", "neumann"))
        if mode not in BOUNDARY_MODES:
            raise ScenarioError("boundary.mode", f"expected neumann or dirichlet, got {mode!r}")
        u1 = b_t.get("u1")
        if mode == "dirichlet":
            if u1 is None:
                raise ScenarioError("boundary.u1", "dirichlet boundary needs u1")
            if isinstance(u1, (int, float)) and not isinstance(u1, bool):
                u1 = [float(u1)]
            if not (u1 == "initial" or (isinstance(u1, list) and all(isinstance(v, (int, float)) for v in u1))):
                raise ScenarioError("boundary.u1", "expected a number, a list of numbers or \"initial\"")

        s_t = _table(raw, "solver")
        _unknown(s_t, {"max_iters", "gap_tol", "residual_tol", "check_every", "polish"}, "solver")
        solver = SolverConfig(
            max_iters=_integer(s_t, "max_iters", "solver", 20000, minimum=1),
            gap_tol=_number(s_t, "gap_tol", "solver", 1e-11, positive=True),
            residual_tol=_number(s_t, "residual_tol", "solver", 1e-8, positive=True),
            check_every=_integer(s_t, "check_every", "solver", 10, minimum=1),
            polish=bool(s_t.get("polish", True)),
        )

        extra: dict[str, Any] = {}
        if job == "flow":
            t = _table(raw, "flow", required=True)
            _unknown(t, {"dt", "steps"}, "flow")
            extra = {"dt": _number(t, "dt", "flow", positive=True), "steps": _integer(t, "steps", "flow", minimum=1)}
        elif job == "resolvent":
            t = _table(raw, "resolvent", required=True)
            _unknown(t, {"lam"}, "resolvent")
            extra = {"lam": _number(t, "lam", "resolvent", positive=True)}
        elif job == "qladder":
            t = _table(raw, "qladder", required=True)
            _unknown(t, {"qs", "dt", "t_end", "moreau"}, "qladder")
            qs = t.get("qs")
            if not (isinstance(qs, list) and qs and all(isinstance(q, (int, float)) and 1 < q <= 2 for q in qs)):
                raise ScenarioError("qladder.qs", "expected a non-empty list of q values in (1, 2]")
            extra = {
                "qs": tuple(float(q) for q in qs),
                "dt": _number(t, "dt", "qladder", positive=True),
                "t_end": _number(t, "t_end", "qladder", positive=True),
                "moreau": bool(t.get("moreau", False)),
            }
        elif job == "refinement-study":
            t = _table(raw, "refinement", required=True)
            _unknown(t, {"cells"}, "refinement")
            cells = t.get("cells")
            if not (isinstance(cells, list) and cells and all(isinstance(c, int) and c >= 1 for c in cells)):
                raise ScenarioError("refinement.cells", "expected a non-empty list of cell counts")
            extra = {"refinement_cells": tuple(cells)}

        initial = InitialProfile.from_raw(_table(raw, "initial"))
        output_dir = raw.get("output_dir", f"runs/{name}")
        if not isinstance(output_dir, str):
            raise ScenarioError("output_dir", "expected a path string")

        scenario = Scenario(
            name=name,
            job=job,
            seed=seed,
            integrand_id=ident,
            operator_kind=kind,
            operator_m=op_m,
            grid_shape=tuple(shape),
            grid_h=h,
            boundary=BOUNDARY_MODES[mode],
            u1=u1 if mode == "dirichlet" else None,
            initial=initial,
            solver=solver,
            output_dir=output_dir,
            raw=raw,
            **extra,
        )
        scenario._check_consistency()
        return scenario

    def _check_consistency(self) -> None:
        try:
            op = self.operator()
        except AvFlowError as e:
            raise ScenarioError("operator", str(e)) from e
        if self.boundary == TRACE_CARRYING and not op.c_elliptic:
            raise ScenarioError("boundary.mode", f"{op.kind} in n={op.n} has no boundary trace")
        if isinstance(self.u1, list) and len(self.u1) not in (1, op.m):
            raise ScenarioError("boundary.u1", f"expected 1 or {op.m} values, got {len(self.u1)}")
        if self.job == "qladder" and self.boundary == TRACE_CARRYING and self.u1 != "initial":
            # q-flows pin the trace; the data must come with an interior extension.
            raise ScenarioError("boundary.u1", 'dirichlet q-ladders need u1 = "initial"')
        if self.job == "refinement-study" and self.n != 1:
            raise ScenarioError("grid.shape", "refinement studies run on 1D grids")

    @property
    def n(self) -> int:
        return len(self.grid_shape)

    def grid(self) -> Grid:
        return Grid(shape=self.grid_shape, h=self.grid_h)

    def operator(self) -> OperatorSpec:
        return operator_spec(self.operator_kind, self.n, self.operator_m)

    def integrand(self) -> Integrand:
        return parse_integrand(self.integrand_id)

    def initial_state(self) -> GridFunction:
        return self.initial.build(self.grid(), self.operator().m, self.seed)

    def dirichlet(self, u0: GridFunction) -> DirichletData | None:
        if self.boundary != TRACE_CARRYING:
            return None
        if self.u1 == "initial":
            return DirichletData.from_extension(u0)
        faces = boundary_faces(u0.grid).count
        values = np.broadcast_to(np.asarray(self.u1, dtype=float), (faces, u0.m))
        return DirichletData(u1=values)

    def resolved_output_dir(self, base: Path | None = None) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if not out.is_absolute():
            out = Path(root) / out if root else (base or Path.cwd()) / out
        return out


def load_text(text: str) -> Scenario:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ScenarioError("<toml>", str(e)) from e
    return Scenario.from_raw(raw)


def load(path: Path) -> tuple[Scenario, str]:
    """Returns (scenario, sha256 of the file bytes)."""

    data = Path(path).read_bytes()
    scenario = load_text(data.decode("utf-8"))
    return scenario, hashlib.sha256(data).hexdigest()


def bundled() -> dict[str, str]:
    """Name -> TOML text of every scenario shipped with the package."""

    out: dict[str, str] = {}
    for entry in sorted(resources.files("av_flow").joinpath("bundled").iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".toml"):
            out[entry.name[: -len(".toml")]] = entry.read_text(encoding="utf-8")
    return out


def resolve_config(ref: str) -> tuple[Scenario, str, str]:
    """
    Accepts a path to a TOML file or the name of a bundled scenario. Returns
    (scenario, sha256, source label).
    """

    p = Path(ref)
    if p.exists():
        scenario, digest = load(p)
        return scenario, digest, str(p)
    shipped = bundled()
    if ref in shipped:
        text = shipped[ref]
        return load_text(text), hashlib.sha256(text.encode("utf-8")).hexdigest(), f"bundled:{ref}"
    raise FileNotFoundError(f"no scenario file or bundled scenario named {ref!r}")
