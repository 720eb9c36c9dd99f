"""
Implicit-Euler flows built from chained resolvents.

A FlowTrace keeps every state together with its energy, mass and the
certificate of the step that produced it. Superlinear q-flows and the
Moreau-regularised flows reuse the same driver with a different integrand.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from av_flow import convex_core as cc
from av_flow.diffop import (
    NEUMANN,
    TRACE_CARRYING,
    DualField,
    GridFunction,
    OperatorSpec,
    apply,
    l2_distance,
    trace,
)
from av_flow.energy import DirichletData, default_operator, realize, relaxed_value
from av_flow.resolvent import CertificateReport, Resolver, SolverConfig

log = logging.getLogger(__name__)

ENERGY_DECAY_TOL = 1e-8


@dataclass(eq=False)
class FlowTrace:
    integrand: str
    op: OperatorSpec
    bc: str
    dt: float
    times: list[float] = field(default_factory=list)
    states: list[GridFunction] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)
    masses: list[float] = field(default_factory=list)
    certificates: list[CertificateReport | None] = field(default_factory=list)
    diagnostics: list[dict[str, float]] = field(default_factory=list)
    smooth_fields: list[DualField] = field(default_factory=list)
    converged: bool = True
    energy_violations: list[int] = field(default_factory=list)

    def append(
        self,
        t: float,
        u: GridFunction,
        energy: float,
        certificate: CertificateReport | None,
        diagnostics: dict[str, float] | None = None,
    ) -> None:
        self.times.append(float(t))
        self.states.append(u)
        self.energies.append(float(energy))
        self.masses.append(float(np.sum(u.mass())))
        self.certificates.append(certificate)
        self.diagnostics.append(dict(diagnostics or {}))

    @property
    def steps(self) -> int:
        return len(self.states) - 1

    @property
    def final(self) -> GridFunction:
        return self.states[-1]

    def state_at(self, t: float) -> GridFunction:
        idx = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.states[idx]

    def rows(self) -> list[dict[str, Any]]:
        out = []
        for k, t in enumerate(self.times):
            cert = self.certificates[k]
            row: dict[str, Any] = {
                "step": k,
                "time": t,
                "energy": self.energies[k],
                "mass": self.masses[k],
                "euler_lagrange_residual": cert.euler_lagrange_residual if cert else 0.0,
                "normal_trace_residual": cert.normal_trace_residual if cert else 0.0,
                "fenchel_gap": cert.fenchel_gap if cert else 0.0,
                "boundary_subgradient_residual": cert.boundary_subgradient_residual if cert else 0.0,
            }
            row.update(self.diagnostics[k])
            out.append(row)
        return out


StepHook = Callable[[int, GridFunction], dict[str, float]]


def _run(
    f: cc.Integrand,
    u0: GridFunction,
    dt: float,
    steps: int,
    bc: str,
    dirichlet: DirichletData | None,
    op: OperatorSpec | None,
    config: SolverConfig,
    hook: StepHook | None = None,
    on_step: Callable[[int, float, GridFunction], None] | None = None,
) -> FlowTrace:
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if steps < 0:
        raise ValueError(f"step count must be non-negative, got {steps}")
    op = op or default_operator(u0)
    resolver = Resolver(f, op, u0.grid, dt, bc, dirichlet, config)
    bdata = resolver.dirichlet
    flow = FlowTrace(integrand=f.ident, op=op, bc=bc, dt=dt)
    flow.append(0.0, u0, relaxed_value(resolver.cells, u0, bdata), None, hook(0, u0) if hook else None)

    u = u0
    z: DualField | None = None
    for k in range(1, steps + 1):
        res = resolver.solve(u, warm_start=z)
        if not res.converged:
            flow.converged = False
            log.warning("flow %s: step %d did not converge; trace truncated at t=%g", f.ident, k, flow.times[-1])
            break
        prev = flow.energies[-1]
        if res.energy > prev + ENERGY_DECAY_TOL * (1.0 + abs(prev)):
            flow.energy_violations.append(k)
            log.warning("flow %s: energy rose at step %d (%.12g -> %.12g)", f.ident, k, prev, res.energy)
        u, z = res.u, res.z
        flow.append(k * dt, u, res.energy, res.certificate, hook(k, u) if hook else None)
        if on_step is not None:
            on_step(k, k * dt, u)
    return flow


def evolve(
    f: cc.Integrand,
    u0: GridFunction,
    dt: float,
    steps: int,
    bc: str = NEUMANN,
    dirichlet: DirichletData | None = None,
    *,
    op: OperatorSpec | None = None,
    config: SolverConfig = SolverConfig(),
    on_step: Callable[[int, float, GridFunction], None] | None = None,
) -> FlowTrace:
    """u^{k+1} = resolvent of F at u^k with parameter dt."""

    return _run(f, u0, dt, steps, bc, dirichlet, op, config, on_step=on_step)


def _young_hook(f: cc.Integrand, q: float, op: OperatorSpec) -> StepHook:
    def hook(_: int, u: GridFunction) -> dict[str, float]:
        cells = realize(f, op, u.grid)
        density = cells.relaxed_density(apply(op, u).cells())
        vol = u.grid.dual_volume
        lhs = float(np.sum(density**q) / q) * vol
        rhs = float(np.sum(density)) * vol - (1.0 - 1.0 / q) * u.grid.volume
        return {"young_slack": lhs - rhs}

    return hook


def qflow(
    f: cc.Integrand,
    q: float,
    u0: GridFunction,
    dt: float,
    steps: int,
    bc: str = NEUMANN,
    dirichlet: DirichletData | None = None,
    *,
    op: OperatorSpec | None = None,
    config: SolverConfig = SolverConfig(),
) -> FlowTrace:
    """
    Implicit Euler for ∫ f(𝔸u)^q. Boundary values become a hard constraint,
    so Dirichlet runs need an extension whose trace carries the data.
    """

    g = cc.qpower(f, q)
    op = op or default_operator(u0)
    if bc == TRACE_CARRYING:
        _check_extension(u0, dirichlet)
    return _run(g, u0, dt, steps, bc, dirichlet, op, config, hook=_young_hook(f, q, op))


def _check_extension(u0: GridFunction, dirichlet: DirichletData | None) -> None:
    if dirichlet is None or dirichlet.extension is None:
        raise ValueError("superlinear Dirichlet flows need boundary data with an extension")
    gap = float(np.max(np.abs(trace(dirichlet.extension) - dirichlet.u1)))
    if gap > 1e-9:
        raise ValueError(f"extension trace differs from the boundary data by {gap:.3e}")


def moreau_flow(
    f: cc.Integrand,
    q: float,
    u0: GridFunction,
    dt: float,
    steps: int,
    bc: str = NEUMANN,
    dirichlet: DirichletData | None = None,
    *,
    lam: float | None = None,
    op: OperatorSpec | None = None,
    config: SolverConfig = SolverConfig(),
) -> FlowTrace:
    """
    Implicit Euler for ∫ (f_λ)^q with f_λ the Moreau envelope; λ defaults to
    q - 1 so both regularisations vanish together. Every step records the
    smooth field ∇(f_λ^q)(𝔸u) and its sup norm against the a priori bound.
    """

    lam = (q - 1.0) if lam is None else lam
    g = cc.qpower(cc.moreau_integrand(f, lam), q)
    op = op or default_operator(u0)
    if bc == TRACE_CARRYING:
        _check_extension(u0, dirichlet)

    smooth: list[DualField] = []

    def hook(_: int, u: GridFunction) -> dict[str, float]:
        cells = realize(g, op, u.grid)
        Y = apply(op, u).cells()
        zq = cc.subgradient(cells.relaxed, cells.points, Y)
        field_ = DualField(values=zq.reshape(u.grid.dual_shape + zq.shape[-2:]), grid=u.grid)
        smooth.append(field_)
        grad_sup = float(np.max(cc.frobenius(Y))) if Y.size else 0.0
        C0 = f.C0
        bound = q * C0 ** (q - 1.0) * (1.0 + grad_sup) ** (q - 1.0) * C0
        return {"z_sup": field_.sup_norm(), "z_bound": bound, "lam": lam}

    flow = _run(g, u0, dt, steps, bc, dirichlet, op, config, hook=hook)
    flow.smooth_fields = smooth[: len(flow.states)]
    return flow


# ---------------------------------------------------------------------------
# 1D plateau structure and convergence studies


@dataclass(frozen=True)
class Plateau:
    start: int
    stop: int
    value: float
    rate: float

    @property
    def nodes(self) -> int:
        return self.stop - self.start


def plateaus(u: GridFunction, tol: float = 1e-9) -> list[tuple[int, int, float]]:
    if u.grid.n != 1 or u.m != 1:
        raise ValueError("plateaus are defined for scalar 1D states")
    v = u.values[:, 0]
    scale = tol * (1.0 + float(np.max(np.abs(v))))
    out: list[tuple[int, int, float]] = []
    start = 0
    for i in range(1, v.size + 1):
        if i == v.size or abs(v[i] - v[i - 1]) > scale:
            out.append((start, i, float(np.mean(v[start:i]))))
            start = i
    return out


def plateau_rates(u: GridFunction, tol: float = 1e-9, weight: float = 1.0) -> list[Plateau]:
    """
    Exact speeds of the discrete weighted TV flow with Neumann ends: each
    plateau moves by the sum of its two jump fluxes over its mass.
    """

    parts = plateaus(u, tol)
    h = u.grid.h
    out = []
    for idx, (start, stop, value) in enumerate(parts):
        flux = 0.0
        if idx + 1 < len(parts):
            flux += weight * math.copysign(1.0, parts[idx + 1][2] - value)
        if idx > 0:
            flux -= weight * math.copysign(1.0, value - parts[idx - 1][2])
        out.append(Plateau(start=start, stop=stop, value=value, rate=flux / ((stop - start) * h)))
    return out


def merge_time(trace_: FlowTrace, tol: float = 1e-9) -> float | None:
    """First recorded time at which the state is a single plateau."""

    for t, u in zip(trace_.times, trace_.states):
        if len(plateaus(u, tol)) == 1:
            return t
    return None


@dataclass(frozen=True)
class LadderRow:
    q: float
    distance: float
    steps: int
    converged: bool


def qladder(
    f: cc.Integrand,
    qs: list[float],
    u0: GridFunction,
    dt: float,
    t_end: float,
    bc: str = NEUMANN,
    dirichlet: DirichletData | None = None,
    *,
    op: OperatorSpec | None = None,
    config: SolverConfig = SolverConfig(),
    moreau: bool = False,
) -> tuple[FlowTrace, list[LadderRow]]:
    """L² distance at t_end between the linear-growth flow and each q-flow."""

    steps = int(round(t_end / dt))
    base = evolve(f, u0, dt, steps, bc, dirichlet, op=op, config=config)
    rows = []
    for q in qs:
        if moreau:
            flow = moreau_flow(f, q, u0, dt, steps, bc, dirichlet, op=op, config=config)
        else:
            flow = qflow(f, q, u0, dt, steps, bc, dirichlet, op=op, config=config)
        k = min(flow.steps, base.steps)
        dist = l2_distance(flow.states[k], base.states[k])
        rows.append(LadderRow(q=q, distance=dist, steps=k, converged=flow.converged and base.converged))
        log.debug("qladder: q=%g distance=%.6g after %d steps", q, dist, k)
    return base, rows


def step_study(
    flow_fn: Callable[[float, int], FlowTrace],
    dt: float,
    t_end: float,
    halvings: int = 3,
) -> list[tuple[float, float]]:
    """
    Successive differences between runs at dt, dt/2, ...; for a first-order
    scheme each difference is about half the previous one. Returns
    (dt, distance to the next finer run) pairs.
    """

    finals = []
    dts = [dt / 2**k for k in range(halvings + 1)]
    for d in dts:
        steps = int(round(t_end / d))
        finals.append(flow_fn(d, steps).final)
    return [(dts[k], l2_distance(finals[k], finals[k + 1])) for k in range(halvings)]


def observed_order(pairs: list[tuple[float, float]]) -> list[float]:
    out = []
    for (d0, e0), (d1, e1) in zip(pairs, pairs[1:]):
        out.append(math.log(e0 / e1) / math.log(d0 / d1) if e0 > 0 and e1 > 0 else float("nan"))
    return out
