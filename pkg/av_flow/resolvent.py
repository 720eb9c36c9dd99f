"""
Resolvent of the relaxed energy: u = argmin ½‖u - w‖² + λ F(u).

The problem is solved through its dual in p = λω z, ω the dual cell weight,

    min_p  ½‖w - Kᵀp‖² + λω Φ*(p/(λω)),

with K = 𝔸 stacked with the face-trace operator when boundary data is
carried (the boundary block has its own scaling, see `_fields`). The primal iterate u = w - Kᵀp satisfies the Euler-Lagrange
equation (w - u)/λ = -div z exactly, so the solve only has to drive the
Fenchel gap down. FISTA with adaptive restart does the bulk of the work;
scalar 1D problems with weighted-norm integrands are box-constrained QPs and
get an exact active-set polish on top.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from av_flow import convex_core as cc
from av_flow.diffop import (
    NEUMANN,
    TRACE_CARRYING,
    DualField,
    Grid,
    GridFunction,
    OperatorSpec,
    adjoint_div,
    apply,
    boundary_faces,
    lipschitz_estimate,
    schur_bound,
    stencil,
    trace,
    trace_matrix,
)
from av_flow.energy import CellIntegrand, DirichletData, default_operator, realize, relaxed_value
from av_flow.errors import DimensionError, OperatorError

log = logging.getLogger(__name__)

POLISH_ROUNDS = 8


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 20000
    gap_tol: float = 1e-11
    residual_tol: float = 1e-8
    check_every: int = 10
    polish: bool = True

    def __post_init__(self) -> None:
        if self.max_iters < 1 or self.check_every < 1:
            raise ValueError("max_iters and check_every must be positive")
        if not (self.gap_tol > 0 and self.residual_tol > 0):
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class CertificateReport:
    euler_lagrange_residual: float
    normal_trace_residual: float
    fenchel_gap: float
    boundary_subgradient_residual: float = 0.0
    inadmissible_cell: int | None = None
    inadmissible_where: str | None = None

    @property
    def admissible(self) -> bool:
        return self.inadmissible_cell is None

    def ok(self, *, gap_tol: float = 1e-8, residual_tol: float = 1e-8) -> bool:
        return (
            self.admissible
            and self.euler_lagrange_residual <= residual_tol
            and self.normal_trace_residual <= residual_tol
            and self.boundary_subgradient_residual <= residual_tol
            and self.fenchel_gap <= gap_tol
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "euler_lagrange_residual": self.euler_lagrange_residual,
            "normal_trace_residual": self.normal_trace_residual,
            "fenchel_gap": self.fenchel_gap,
            "boundary_subgradient_residual": self.boundary_subgradient_residual,
            "inadmissible_cell": self.inadmissible_cell,
            "inadmissible_where": self.inadmissible_where,
        }


@dataclass(frozen=True, eq=False)
class ResolventResult:
    u: GridFunction
    z: DualField
    r: GridFunction
    w: GridFunction
    lam: float
    energy: float
    certificate: CertificateReport
    iterations: int
    converged: bool
    polished: bool = False

    def verify(
        self,
        f: cc.Integrand,
        bc: str = NEUMANN,
        dirichlet: DirichletData | None = None,
        *,
        op: OperatorSpec | None = None,
    ) -> CertificateReport:
        return verify_certificate(f, self.w, self.u, self.z, self.lam, bc, dirichlet, op=op)


def _shrink(X: np.ndarray, tau: np.ndarray) -> np.ndarray:
    norm = cc.frobenius(X)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(norm > 0, np.maximum(0.0, 1.0 - tau / norm), 0.0)
    return X * scale[..., None, None]


class Resolver:
    """
    The resolvent for one (integrand, operator, grid, λ, boundary data).

    Assembly, the Lipschitz bound and the cell realisation of f are done once,
    so a flow can call `solve` at every step.
    """

    def __init__(
        self,
        f: cc.Integrand,
        op: OperatorSpec,
        grid: Grid,
        lam: float,
        bc: str = NEUMANN,
        dirichlet: DirichletData | None = None,
        config: SolverConfig = SolverConfig(),
    ) -> None:
        if not lam > 0:
            raise ValueError(f"resolvent parameter must be positive, got {lam}")
        if bc not in (NEUMANN, TRACE_CARRYING):
            raise ValueError(f"unknown boundary mode: {bc}")
        if bc == TRACE_CARRYING:
            if not op.c_elliptic:
                raise OperatorError(f"{op.kind} in n={op.n} has no boundary trace")
            if dirichlet is None:
                raise ValueError("trace-carrying resolvent needs boundary data")
            if dirichlet.u1.shape != (boundary_faces(grid).count, op.m):
                raise DimensionError(f"boundary data must be (faces, m), got {dirichlet.u1.shape}")

        self.op = op
        self.grid = grid
        self.lam = float(lam)
        # Interior multiplier: each dual cell carries ω = dual_volume / hⁿ.
        self.lam_i = self.lam * grid.dual_weight
        self.bc = bc
        self.dirichlet = dirichlet if bc == TRACE_CARRYING else None
        self.config = config
        self.cells: CellIntegrand = realize(f, op, grid)

        K = stencil(op, grid)
        self.n_int = K.shape[0]
        self.block = (op.m, op.n)
        if self.dirichlet is not None:
            K = sp.vstack([K, trace_matrix(op, grid)], format="csr")
            self.shift = op.project(self.cells.outer_normal(self.dirichlet.u1))
            self.slope_b = self.cells.boundary_slope
        else:
            self.shift = None
            self.slope_b = None
        self.K = K.tocsr()
        self.Kt = self.K.T.tocsr()
        self.L = max(min(1.1 * lipschitz_estimate(self.K), schur_bound(self.K)), 1e-12)
        log.debug("resolver: %d dual unknowns, L=%.4g, lam=%.4g", self.K.shape[0], self.L, self.lam)

    # -- dual blocks -------------------------------------------------------

    def _split(self, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        inner = vec[: self.n_int].reshape((-1,) + self.block)
        if self.dirichlet is None:
            return inner, None
        return inner, vec[self.n_int :].reshape((-1,) + self.block)

    def _prox_dual(self, v: np.ndarray) -> np.ndarray:
        """prox of (1/L)(λΦ)*, by the Moreau identity on each block."""

        c = 1.0 / self.L
        kappa = self.lam_i / c
        vi, vb = self._split(v)
        pi = vi - c * cc.prox(self.cells.relaxed, kappa, self.cells.points, vi / c)
        if vb is None:
            return pi.reshape(-1)
        Av = self.op.project(vb)
        tau = (self.lam / c) * self.slope_b / self.grid.h
        pb = Av - c * self.shift - c * _shrink(Av / c - self.shift, tau)
        return np.concatenate([pi.reshape(-1), pb.reshape(-1)])

    def _fields(self, p: np.ndarray) -> DualField:
        pi, pb = self._split(p)
        values = (pi / self.lam_i).reshape(self.grid.dual_shape + self.block)
        boundary = None if pb is None else -(self.grid.h / self.lam) * pb
        return DualField(values=values, grid=self.grid, boundary=boundary)

    def _warm(self, z: DualField | None) -> np.ndarray:
        p = np.zeros(self.K.shape[0])
        if z is None:
            return p
        p[: self.n_int] = self.lam_i * self.op.project(z.values).reshape(-1)
        if self.dirichlet is not None and z.boundary is not None:
            p[self.n_int :] = -(self.lam / self.grid.h) * self.op.project(z.boundary).reshape(-1)
        return p

    def _gap(self, w: np.ndarray, p: np.ndarray) -> tuple[float, float, float]:
        """Scaled (gap, objective, hard-constraint violation) at p."""

        u = w - self.Kt @ p
        Ku = self.K @ u
        Yi, Yb = self._split(Ku)
        pi, pb = self._split(p)
        z = pi / self.lam_i
        finite, gstar = cc.conjugate_values(self.cells.relaxed, self.cells.points, z)
        g = self.cells.relaxed_density(Yi)
        if not np.all(finite):
            return np.inf, np.inf, 0.0
        gap = self.lam_i * float(np.sum(g + gstar - np.sum(z * Yi, axis=(-2, -1))))
        objective = 0.5 * float(np.sum((u - w) ** 2)) + self.lam_i * float(np.sum(g))
        violation = 0.0
        if Yb is not None:
            D = Yb - self.shift
            norms = cc.frobenius(D)
            hard = np.isinf(self.slope_b)
            with np.errstate(invalid="ignore"):
                soft_pen = np.where(hard, 0.0, self.slope_b * norms) / self.grid.h
            gap += self.lam * float(np.sum(soft_pen)) - float(np.sum(pb * D))
            objective += self.lam * float(np.sum(soft_pen))
            if np.any(hard):
                violation = float(np.max(norms[hard]))
        return max(gap, 0.0), objective, violation

    # -- active-set polish -------------------------------------------------

    def _box(self) -> tuple[np.ndarray, np.ndarray] | None:
        relaxed = self.cells.relaxed
        if self.block != (1, 1) or not isinstance(relaxed, cc.WeightedNorm):
            return None
        mu = self.lam_i * np.asarray(relaxed.weight(self.cells.points), dtype=float).reshape(-1)
        c = np.zeros_like(mu)
        if self.dirichlet is not None:
            if not np.all(np.isfinite(self.slope_b)):
                return None
            mu = np.concatenate([mu, self.lam * self.slope_b / self.grid.h])
            c = np.concatenate([c, self.shift.reshape(-1)])
        return mu, c

    def _polish(self, w: np.ndarray, p: np.ndarray, box: tuple[np.ndarray, np.ndarray]) -> np.ndarray | None:
        mu, c = box
        sign = np.where(p >= mu * (1 - 1e-9), 1.0, np.where(p <= -mu * (1 - 1e-9), -1.0, 0.0))
        for _ in range(POLISH_ROUNDS):
            free = sign == 0
            q = np.where(free, 0.0, sign * mu)
            Kf = self.K[free]
            rhs = Kf @ (w - self.Kt @ q) - c[free]
            if Kf.shape[0]:
                with warnings.catch_warnings():
                    warnings.simplefilter("error")
                    try:
                        sol = spsolve((Kf @ Kf.T).tocsc(), rhs)
                    except Exception:
                        return None
                sol = np.atleast_1d(sol)
                if not np.all(np.isfinite(sol)):
                    return None
                q[free] = sol
            grad = -(self.K @ (w - self.Kt @ q)) + c
            tol = 1e-9 * (1.0 + float(np.max(np.abs(grad))))
            over = free & (np.abs(q) > mu * (1 + 1e-12))
            wrong = ((sign > 0) & (grad > tol)) | ((sign < 0) & (grad < -tol))
            if not over.any() and not wrong.any():
                return q
            sign = np.where(over, np.sign(q), np.where(wrong, 0.0, sign))
        return None

    # -- driver ------------------------------------------------------------

    def solve(self, w: GridFunction, warm_start: DualField | None = None) -> ResolventResult:
        if w.grid != self.grid or w.m != self.op.m:
            raise DimensionError("w does not live on this resolver's grid")
        cfg = self.config
        wv = w.flat()
        p = self._warm(warm_start)
        y = p.copy()
        t = 1.0
        box = self._box() if cfg.polish else None
        best = (np.inf, p)
        converged = False
        polished = False
        iterations = 0
        for k in range(1, cfg.max_iters + 1):
            iterations = k
            grad = -(self.K @ (wv - self.Kt @ y))
            p_new = self._prox_dual(y - grad / self.L)
            if np.dot(y - p_new, p_new - p) > 0:
                t = 1.0
                y = p_new
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = p_new + ((t - 1.0) / t_new) * (p_new - p)
            p, t = p_new, t_new

            if k % cfg.check_every and k != cfg.max_iters:
                continue
            gap, objective, violation = self._gap(wv, p)
            if gap < best[0]:
                best = (gap, p)
            if box is not None:
                q = self._polish(wv, p, box)
                if q is not None:
                    qgap, _, _ = self._gap(wv, q)
                    if qgap <= gap:
                        p = y = q
                        t = 1.0
                        gap = qgap
                        polished = True
                        best = (gap, p)
            if gap <= cfg.gap_tol * (1.0 + abs(objective)) and violation <= cfg.residual_tol:
                converged = True
                break

        p = best[1]
        if not converged:
            log.warning("resolvent: gap %.3e above tolerance after %d iterations", best[0], iterations)
        u = GridFunction.from_flat(self.grid, wv - self.Kt @ p, self.op.m)
        z = self._fields(p)
        r = GridFunction.from_flat(self.grid, (wv - u.flat()) / self.lam, self.op.m)
        cert = certify(self.cells, w, u, z, self.lam, self.bc, self.dirichlet)
        log.debug(
            "resolvent: %d iterations, fenchel gap %.3e, EL residual %.3e",
            iterations,
            cert.fenchel_gap,
            cert.euler_lagrange_residual,
        )
        return ResolventResult(
            u=u,
            z=z,
            r=r,
            w=w,
            lam=self.lam,
            energy=relaxed_value(self.cells, u, self.dirichlet),
            certificate=cert,
            iterations=iterations,
            converged=converged,
            polished=polished,
        )


def _neumann_flux(grid: Grid, balance: np.ndarray) -> float:
    """
    Largest normal flux |z·ν| that the boundary nodes would have to carry to
    close the balance r + div z there: h times the nodal imbalance.
    """

    nodes = np.unique(boundary_faces(grid).trace.indices)
    flat = balance.reshape(grid.node_count, -1)
    return float(np.max(np.abs(flat[nodes]))) * grid.h if nodes.size else 0.0


def certify(
    cells: CellIntegrand,
    w: GridFunction,
    u: GridFunction,
    z: DualField,
    lam: float,
    bc: str = NEUMANN,
    dirichlet: DirichletData | None = None,
) -> CertificateReport:
    """Recompute every certificate quantity from (w, u, z) alone."""

    op, grid = cells.op, u.grid
    r = (w.values - u.values) / lam
    div = adjoint_div(op, z, bc).values
    el = float(np.max(np.abs(r + div)))

    normal = 0.0
    if bc == NEUMANN:
        normal = _neumann_flux(grid, r + div)
        if z.boundary is not None:
            normals = boundary_faces(grid).normals
            normal = max(normal, float(np.max(np.abs(np.einsum("fcd,fd->fc", z.boundary, normals)))))

    zc = z.cells()
    Y = apply(op, u).cells()
    finite, gstar = cc.conjugate_values(cells.relaxed, cells.points, zc)
    bad = np.flatnonzero(~np.asarray(finite))
    off_range = np.flatnonzero(cc.frobenius(zc - op.project(zc)) > 1e-10 * (1.0 + cc.frobenius(zc)))
    if bad.size or off_range.size:
        cell = int(bad[0]) if bad.size else int(off_range[0])
        return CertificateReport(el, normal, np.inf, inadmissible_cell=cell, inadmissible_where="interior")
    gap = float(np.sum(cells.relaxed_density(Y) + gstar - np.sum(zc * Y, axis=(-2, -1)))) * grid.dual_volume

    sub = 0.0
    if bc == TRACE_CARRYING and dirichlet is not None:
        zb = np.zeros((boundary_faces(grid).count,) + zc.shape[-2:]) if z.boundary is None else z.boundary
        V = op.project(cells.outer_normal(trace(u) - dirichlet.u1))
        tV = cc.frobenius(V)
        tz = cc.frobenius(op.project(zb))
        s = cells.boundary_slope
        over = np.flatnonzero(tz > s * (1.0 + cc.DOMAIN_RTOL) + 1e-12)
        if over.size:
            return CertificateReport(el, normal, np.inf, inadmissible_cell=int(over[0]), inadmissible_where="boundary")
        hard = np.isinf(s)
        with np.errstate(invalid="ignore"):
            soft = np.where(hard, 0.0, np.where(tV > 0, s * tV, 0.0))
        gap += float(np.sum(soft + np.sum(zb * V, axis=(-2, -1)))) * grid.face_measure
        # Distance of -z_b from the subdifferential of s|·| at V.
        moving = tV > 1e-12
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(moving[:, None, None], V / tV[:, None, None], 0.0)
        dist = np.where(
            hard,
            tV,
            np.where(moving, cc.frobenius(-zb - s[:, None, None] * unit), np.maximum(tz - s, 0.0)),
        )
        sub = float(np.max(dist)) if dist.size else 0.0

    return CertificateReport(
        euler_lagrange_residual=el,
        normal_trace_residual=normal,
        fenchel_gap=gap,
        boundary_subgradient_residual=sub,
    )


def resolve(
    f: cc.Integrand,
    w: GridFunction,
    lam: float,
    bc: str = NEUMANN,
    dirichlet: DirichletData | None = None,
    *,
    op: OperatorSpec | None = None,
    config: SolverConfig = SolverConfig(),
    warm_start: DualField | None = None,
) -> ResolventResult:
    """
    Solve one resolvent problem. Hitting the iteration cap is not an error:
    the best iterate comes back with converged=False.
    """

    op = op or default_operator(w)
    return Resolver(f, op, w.grid, lam, bc, dirichlet, config).solve(w, warm_start)


def verify_certificate(
    f: cc.Integrand,
    w: GridFunction,
    u: GridFunction,
    z: DualField,
    lam: float,
    bc: str = NEUMANN,
    dirichlet: DirichletData | None = None,
    *,
    op: OperatorSpec | None = None,
) -> CertificateReport:
    op = op or default_operator(w)
    return certify(realize(f, op, w.grid), w, u, z, lam, bc, dirichlet)
