"""
Primal, dual and relaxed energies of u on a grid.

The relaxed energy is computed as the supremum of the dual functional over
admissible fields z; the maximiser doubles as the certificate that the
primal and dual values agree.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from av_flow import convex_core as cc
from av_flow.diffop import (
    NEUMANN,
    TRACE_CARRYING,
    DualField,
    Grid,
    GridFunction,
    OperatorSpec,
    apply,
    boundary_faces,
    boundary_pairing,
    operator_spec,
    trace,
)
from av_flow.errors import DimensionError, InadmissibleFieldError, OperatorError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnergyConfig:
    max_iters: int = 2000
    gap_tol: float = 1e-8
    change_tol: float = 1e-10
    check_every: int = 5


@dataclass(frozen=True, eq=False)
class DirichletData:
    """Prescribed boundary values per face, plus an optional interior extension."""

    u1: np.ndarray
    extension: GridFunction | None = None

    def __post_init__(self) -> None:
        arr = np.array(self.u1, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        arr.setflags(write=False)
        object.__setattr__(self, "u1", arr)

    @staticmethod
    def from_extension(extension: GridFunction) -> DirichletData:
        return DirichletData(u1=trace(extension), extension=extension)

    @staticmethod
    def from_function(grid: Grid, fn: Callable[[np.ndarray], np.ndarray], m: int = 1) -> DirichletData:
        faces = boundary_faces(grid)
        values = np.asarray(fn(faces.points), dtype=float).reshape(faces.count, m)
        return DirichletData(u1=values)


@dataclass(frozen=True, eq=False)
class CellIntegrand:
    """
    An integrand realised on one grid. `primal` evaluates f at the cells as
    the plain Riemann sum does; `relaxed` is the lower semicontinuous
    realisation that the dual problem actually sees.
    """

    source: cc.Integrand
    primal: cc.Integrand
    relaxed: cc.Integrand
    op: OperatorSpec
    grid: Grid
    points: np.ndarray
    boundary_slope: np.ndarray

    def relaxed_density(self, Y: np.ndarray) -> np.ndarray:
        return np.asarray(cc.evaluate(self.relaxed, self.points, Y))

    def boundary_density(self, v: np.ndarray) -> np.ndarray:
        """h(x, v) = f^∞(x, -v ⊗ ν) per face, using the adjacent cell's slope."""

        Y = self.op.project(self.outer_normal(v))
        t = cc.frobenius(Y)
        with np.errstate(invalid="ignore"):
            return np.where(t > 0, t * self.boundary_slope, 0.0)

    def outer_normal(self, v: np.ndarray) -> np.ndarray:
        faces = boundary_faces(self.grid)
        return np.asarray(v).reshape(faces.count, self.op.m)[:, :, None] * faces.normals[:, None, :]


def default_operator(u: GridFunction) -> OperatorSpec:
    return operator_spec("full-gradient", u.grid.n, u.m)


def realize(f: cc.Integrand, op: OperatorSpec, grid: Grid) -> CellIntegrand:
    if op.n != grid.n:
        raise DimensionError(f"operator acts on n={op.n}, grid has n={grid.n}")
    if f.A is not None and f.A.shape != op.A.shape:
        raise DimensionError(f"integrand projection {f.A.shape} does not match the operator {op.A.shape}")
    fA = f.with_projection(op.A)
    relaxed = fA.on_cells(grid, relaxed=True)
    points = grid.dual_points().reshape(-1, grid.n)
    slopes = np.broadcast_to(relaxed.recession_slope(points), (grid.dual_count,))
    return CellIntegrand(
        source=f,
        primal=fA.on_cells(grid, relaxed=False),
        relaxed=relaxed,
        op=op,
        grid=grid,
        points=points,
        boundary_slope=np.asarray(slopes)[boundary_faces(grid).cell],
    )


def boundary_integrand_h(f: cc.Integrand, x: Any, v: Any, nu: Any) -> float:
    """h(x, v) = f^∞(x, -v ⊗ ν)."""

    outer = np.outer(np.atleast_1d(np.asarray(v, dtype=float)), np.atleast_1d(np.asarray(nu, dtype=float)))
    return float(cc.recession(f, x, -outer))


@dataclass
class EnergyReport:
    primal: float
    dual: float
    z: DualField
    iterations: int
    converged: bool
    boundary_term: float = 0.0
    direct_dual: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.primal - self.dual

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "primal": self.primal,
            "dual": self.dual,
            "gap": self.gap,
            "boundary_term": self.boundary_term,
            "iterations": self.iterations,
            "converged": self.converged,
            "z_sup": self.z.sup_norm(),
        }
        if self.direct_dual is not None:
            out["direct_dual"] = self.direct_dual
        out.update(self.extra)
        return out


def primal_energy(f: cc.Integrand, u: GridFunction, *, op: OperatorSpec | None = None) -> float:
    """∫ f(x, 𝔸u) with f evaluated pointwise on the cells."""

    op = op or default_operator(u)
    cells = realize(f, op, u.grid)
    Y = apply(op, u).cells()
    return float(np.sum(cc.evaluate(cells.primal, cells.points, Y)) * u.grid.dual_volume)


def relaxed_value(cells: CellIntegrand, u: GridFunction, dirichlet: DirichletData | None = None) -> float:
    """Closed-form value of the relaxed functional (plus the boundary penalty)."""

    Y = apply(cells.op, u).cells()
    value = float(np.sum(cells.relaxed_density(Y)) * u.grid.dual_volume)
    if dirichlet is not None:
        value += float(np.sum(cells.boundary_density(trace(u) - dirichlet.u1)) * u.grid.face_measure)
    return value


def _check_admissible(cells: CellIntegrand, z: DualField, dirichlet: DirichletData | None) -> np.ndarray:
    finite, values = cc.conjugate_values(cells.relaxed, cells.points, z.cells())
    bad = np.flatnonzero(~np.asarray(finite))
    if bad.size:
        raise InadmissibleFieldError("z leaves the domain of f*", cell=int(bad[0]), where="interior")
    if dirichlet is not None and z.boundary is not None:
        norms = cc.frobenius(cells.op.project(z.boundary))
        over = np.flatnonzero(norms > cells.boundary_slope * (1.0 + cc.DOMAIN_RTOL) + 1e-300)
        if over.size:
            raise InadmissibleFieldError("boundary z leaves the recession ball", cell=int(over[0]), where="boundary")
    return np.asarray(values)


def dual_energy(
    f: cc.Integrand,
    u: GridFunction,
    z: DualField,
    bc: str = NEUMANN,
    dirichlet: DirichletData | None = None,
    *,
    op: OperatorSpec | None = None,
) -> float:
    """
    -∫ f*(x, z) + ⟨z, 𝔸u⟩, plus ⟨z_b ν, u₁ - u⟩ on the boundary when traces are
    carried. z is read on range(A) only.
    """

    op = op or default_operator(u)
    if bc == TRACE_CARRYING:
        if not op.c_elliptic:
            raise OperatorError(f"{op.kind} in n={op.n} has no boundary trace")
        if dirichlet is None:
            raise ValueError("trace-carrying dual energy needs boundary data")
    cells = realize(f, op, u.grid)
    return _dual_value(cells, u, z, dirichlet if bc == TRACE_CARRYING else None)


def _dual_value(cells: CellIntegrand, u: GridFunction, z: DualField, dirichlet: DirichletData | None) -> float:
    values = _check_admissible(cells, z, dirichlet)
    Y = apply(cells.op, u)
    zc = cells.op.project(z.cells())
    value = float((np.sum(zc * Y.cells()) - np.sum(values)) * u.grid.dual_volume)
    if dirichlet is not None and z.boundary is not None:
        value -= boundary_pairing(cells.op, z, trace(u) - dirichlet.u1)
    return value


def relaxed_energy(
    f: cc.Integrand,
    u: GridFunction,
    bc: str = NEUMANN,
    dirichlet: DirichletData | None = None,
    *,
    op: OperatorSpec | None = None,
    config: EnergyConfig = EnergyConfig(),
) -> EnergyReport:
    """
    Maximise the dual functional by proximal ascent
    z <- prox_{τ f*}(z + τ 𝔸u), cell by cell, with the step τ scaled to |𝔸u|
    so flat cells converge as fast as steep ones.
    """

    op = op or default_operator(u)
    trace_mode = bc == TRACE_CARRYING
    if trace_mode and dirichlet is None:
        raise ValueError("trace-carrying energy needs boundary data")
    if trace_mode and not op.c_elliptic:
        raise OperatorError(f"{op.kind} in n={op.n} has no boundary trace")
    cells = realize(f, op, u.grid)
    bdata = dirichlet if trace_mode else None

    Y = apply(op, u).cells()
    tY = cc.frobenius(Y)
    tau = 10.0 * max(1.0, cells.relaxed.C0) * (1.0 + 1.0 / np.maximum(tY, 1e-12))
    z = np.zeros_like(Y)

    zb = None
    if bdata is not None:
        # The boundary block is linear with a ball constraint: one projection is exact.
        V = op.project(cells.outer_normal(trace(u) - bdata.u1))
        tV = cc.frobenius(V)
        with np.errstate(invalid="ignore", divide="ignore"):
            zb = np.where((tV > 0)[:, None, None], -V / tV[:, None, None] * cells.boundary_slope[:, None, None], 0.0)
        if np.any(np.isinf(cells.boundary_slope) & (tV > 0)):
            # A superlinear boundary penalty is a hard constraint that u violates.
            return EnergyReport(
                primal=np.inf,
                dual=np.inf,
                z=DualField.zeros(op, u.grid),
                iterations=0,
                converged=True,
                boundary_term=np.inf,
            )

    target = relaxed_value(cells, u, bdata)
    dual = -np.inf
    iterations = 0
    converged = False
    for k in range(1, config.max_iters + 1):
        iterations = k
        z_new = cc.prox_conjugate(cells.relaxed, tau, cells.points, z + tau[:, None, None] * Y)
        change = float(np.max(np.abs(z_new - z))) if z.size else 0.0
        z = z_new
        if k % config.check_every == 0 or change <= config.change_tol * (1.0 + float(np.max(np.abs(z)))):
            field_ = DualField(values=z.reshape(u.grid.dual_shape + Y.shape[-2:]), grid=u.grid, boundary=zb)
            dual = _dual_value(cells, u, field_, bdata)
            if target - dual <= config.gap_tol * (1.0 + abs(target)) or change <= config.change_tol:
                converged = True
                break

    if not converged:
        log.warning("relaxed_energy: gap %.3e after %d iterations", target - dual, iterations)
    zf = DualField(values=z.reshape(u.grid.dual_shape + Y.shape[-2:]), grid=u.grid, boundary=zb)
    dual = _dual_value(cells, u, zf, bdata)
    bterm = 0.0
    if bdata is not None:
        bterm = float(np.sum(cells.boundary_density(trace(u) - bdata.u1)) * u.grid.face_measure)
    log.debug("relaxed_energy: value %.12g dual %.12g in %d iterations", target, dual, iterations)
    return EnergyReport(
        primal=target,
        dual=dual,
        z=zf,
        iterations=iterations,
        converged=converged,
        boundary_term=bterm,
    )


def dirichlet_energy(
    f: cc.Integrand,
    u: GridFunction,
    dirichlet: DirichletData,
    *,
    op: OperatorSpec | None = None,
    config: EnergyConfig = EnergyConfig(),
) -> EnergyReport:
    """
    F_{u₁}[u] = F[u] + Σ h(x, u - u₁) over the faces, cross-checked against
    the supremum of the trace-carrying dual functional.
    """

    op = op or default_operator(u)
    if not op.c_elliptic:
        raise OperatorError(f"{op.kind} in n={op.n} has no boundary trace; Dirichlet energy is undefined")
    interior = relaxed_energy(f, u, NEUMANN, op=op, config=config)
    direct = relaxed_energy(f, u, TRACE_CARRYING, dirichlet, op=op, config=config)
    bterm = direct.boundary_term
    value = interior.dual + bterm
    defect = abs(direct.dual - value)
    if np.isfinite(value) and defect > 1e-6 * (1.0 + abs(value)):
        log.warning("dirichlet_energy: boundary representation defect %.3e", defect)
    return EnergyReport(
        primal=interior.primal + bterm,
        dual=value,
        z=direct.z,
        iterations=interior.iterations + direct.iterations,
        converged=interior.converged and direct.converged,
        boundary_term=bterm,
        direct_dual=direct.dual,
    )


@dataclass(frozen=True)
class RefinementRow:
    cells: int
    h: float
    primal: float
    dual: float

    @property
    def gap(self) -> float:
        return self.primal - self.dual


def refinement_study(
    f: cc.Integrand,
    profile: Callable[[Grid], GridFunction],
    cells: list[int],
    *,
    kind: str = "full-gradient",
    config: EnergyConfig = EnergyConfig(),
) -> list[RefinementRow]:
    """Primal and dual energies of one profile on a sequence of unit 1D grids."""

    rows: list[RefinementRow] = []
    for N in cells:
        grid = Grid.unit(N)
        u = profile(grid)
        op = operator_spec(kind, 1, u.m)
        report = relaxed_energy(f, u, op=op, config=config)
        rows.append(RefinementRow(cells=N, h=grid.h, primal=primal_energy(f, u, op=op), dual=report.dual))
        log.debug("refinement: N=%d primal=%.12g dual=%.12g", N, rows[-1].primal, rows[-1].dual)
    return rows
