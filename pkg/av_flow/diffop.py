"""
Constant-coefficient first-order operators on a uniform grid.

Primal fields u live on the nodes of a grid with `shape` cells per axis and
spacing h; 𝔸u lives on the dual cells. In 1D the dual cells are the grid
cells. In 2D every square is split along its anti-diagonal into a lower and
an upper triangle, and u is read as the continuous piecewise-linear (P1)
interpolant, so the kernel of the full gradient is exactly the constants and
that of the symmetric gradient exactly the rigid motions. On each dual cell
𝔸u = A(Du) with A the orthogonal projection of the operator. Everything is
assembled once as a scipy.sparse matrix per (operator, grid), and the
divergence is its weighted transpose plus a trace term, so the discrete
Green identity holds to rounding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp

from av_flow.convex_core import project
from av_flow.errors import DimensionError, OperatorError

log = logging.getLogger(__name__)

FULL_GRADIENT = "full-gradient"
SYMMETRIC_GRADIENT = "symmetric-gradient"
DIVERGENCE = "divergence"
OPERATOR_KINDS = (FULL_GRADIENT, SYMMETRIC_GRADIENT, DIVERGENCE)

NEUMANN = "neumann"
TRACE_CARRYING = "trace-carrying"
BOUNDARY_MODES = (NEUMANN, TRACE_CARRYING)


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    kind: str
    m: int
    n: int
    A: np.ndarray

    def __post_init__(self) -> None:
        k = self.m * self.n
        if self.A.shape != (k, k):
            raise DimensionError(f"projection must be {k}x{k}, got {self.A.shape}")
        err = max(float(np.max(np.abs(self.A - self.A.T))), float(np.max(np.abs(self.A @ self.A - self.A))))
        if err > 1e-12:
            raise OperatorError(f"{self.kind}: A is not an orthogonal projection (defect {err:.2e})")
        self.A.setflags(write=False)

    @property
    def c_elliptic(self) -> bool:
        # The pure divergence loses all boundary information once n > 1.
        return self.kind != DIVERGENCE or self.n == 1

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.kind, self.m, self.n)

    def project(self, y: np.ndarray) -> np.ndarray:
        return project(self.A, y)


def operator_spec(kind: str, n: int, m: int | None = None) -> OperatorSpec:
    if kind not in OPERATOR_KINDS:
        raise OperatorError(f"unknown operator kind: {kind}")
    if n not in (1, 2):
        raise DimensionError(f"only n = 1 or 2 is supported, got {n}")
    if kind == FULL_GRADIENT:
        m = 1 if m is None else m
        if m < 1:
            raise DimensionError(f"m must be positive, got {m}")
        return OperatorSpec(kind=kind, m=m, n=n, A=np.eye(m * n))

    if m is not None and m != n:
        raise DimensionError(f"{kind} needs m = n, got m={m}, n={n}")
    k = n * n
    if kind == SYMMETRIC_GRADIENT:
        A = np.zeros((k, k))
        for c in range(n):
            for d in range(n):
                A[c * n + d, c * n + d] += 0.5
                A[c * n + d, d * n + c] += 0.5
    else:
        e = np.eye(n).reshape(-1)
        A = np.outer(e, e) / n
    return OperatorSpec(kind=kind, m=n, n=n, A=A)


@dataclass(frozen=True)
class Grid:
    shape: tuple[int, ...]
    h: float

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "h", float(self.h))
        if len(shape) not in (1, 2):
            raise DimensionError(f"only n = 1 or 2 is supported, got shape {shape}")
        if any(s < 1 for s in shape):
            raise DimensionError(f"every axis needs at least one cell, got {shape}")
        if not self.h > 0:
            raise DimensionError(f"grid spacing must be positive, got {self.h}")

    @staticmethod
    def unit(shape: tuple[int, ...] | int) -> Grid:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return Grid(shape=shape, h=1.0 / shape[0])

    @property
    def n(self) -> int:
        return len(self.shape)

    @property
    def node_shape(self) -> tuple[int, ...]:
        return tuple(s + 1 for s in self.shape)

    @property
    def cell_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def node_count(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def cell_volume(self) -> float:
        return self.h**self.n

    @property
    def face_measure(self) -> float:
        return self.h ** (self.n - 1)

    @property
    def volume(self) -> float:
        return self.cell_count * self.cell_volume

    @property
    def dual_shape(self) -> tuple[int, ...]:
        return self.shape if self.n == 1 else self.shape + (2,)

    @property
    def dual_count(self) -> int:
        return int(np.prod(self.dual_shape))

    @property
    def dual_weight(self) -> float:
        """Volume of one dual cell relative to the node weight h^n."""

        return 1.0 if self.n == 1 else 0.5

    @property
    def dual_volume(self) -> float:
        return self.dual_weight * self.cell_volume

    def node_coords(self) -> np.ndarray:
        axes = [np.arange(s) * self.h for s in self.node_shape]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_lower(self) -> np.ndarray:
        axes = [np.arange(s) * self.h for s in self.shape]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_centres(self) -> np.ndarray:
        return self.cell_lower() + 0.5 * self.h

    def dual_points(self) -> np.ndarray:
        """Dual cell barycentres, shape (*dual_shape, n)."""

        if self.n == 1:
            return self.cell_centres()
        lower = self.cell_lower()
        return np.stack([lower + self.h / 3.0, lower + 2.0 * self.h / 3.0], axis=-2)

    def dual_extent(self, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper coordinate of every dual cell along one axis."""

        lower = self.cell_lower()[..., axis]
        if self.n == 2:
            lower = np.repeat(lower[..., None], 2, axis=-1)
        return lower, lower + self.h

    def to_json(self) -> dict[str, object]:
        return {"shape": list(self.shape), "h": self.h}


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Node values of u: shape (*node_shape, m). Read-only once built."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=float)
        if arr.shape == self.grid.node_shape:
            arr = arr[..., None]
        if arr.shape[:-1] != self.grid.node_shape:
            raise DimensionError(f"expected node shape {self.grid.node_shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("grid function has non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @staticmethod
    def from_function(grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> GridFunction:
        return GridFunction(values=fn(grid.node_coords()), grid=grid)

    @staticmethod
    def from_flat(grid: Grid, flat: np.ndarray, m: int) -> GridFunction:
        return GridFunction(values=np.asarray(flat).reshape(grid.node_shape + (m,)), grid=grid)

    @property
    def m(self) -> int:
        return int(self.values.shape[-1])

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def mass(self) -> np.ndarray:
        return np.sum(self.values.reshape(-1, self.m), axis=0) * self.grid.cell_volume


def l2_distance(u: GridFunction, v: GridFunction) -> float:
    diff = u.values - v.values
    return float(np.sqrt(np.sum(diff * diff) * u.grid.cell_volume))


@dataclass(frozen=True, eq=False)
class DualField:
    """
    Dual cell values z of shape (*dual_shape, m, n) plus an optional boundary
    layer (faces, m, n) used by trace-carrying problems.
    """

    values: np.ndarray
    grid: Grid
    boundary: np.ndarray | None = None

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=float)
        dual = self.grid.dual_shape
        if arr.shape[: len(dual)] != dual or arr.ndim != len(dual) + 2:
            raise DimensionError(f"expected dual shape {dual} + (m, n), got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if self.boundary is not None:
            b = np.array(self.boundary, dtype=float)
            faces = boundary_faces(self.grid)
            if b.shape != (faces.count,) + arr.shape[-2:]:
                raise DimensionError(f"boundary layer must be {(faces.count,) + arr.shape[-2:]}, got {b.shape}")
            b.setflags(write=False)
            object.__setattr__(self, "boundary", b)

    @staticmethod
    def projected(op: OperatorSpec, values: np.ndarray, grid: Grid, boundary: np.ndarray | None = None) -> DualField:
        b = None if boundary is None else op.project(np.asarray(boundary, dtype=float))
        return DualField(values=op.project(np.asarray(values, dtype=float)), grid=grid, boundary=b)

    @staticmethod
    def zeros(op: OperatorSpec, grid: Grid, *, with_boundary: bool = False) -> DualField:
        b = np.zeros((boundary_faces(grid).count, op.m, op.n)) if with_boundary else None
        return DualField(values=np.zeros(grid.dual_shape + (op.m, op.n)), grid=grid, boundary=b)

    def cells(self) -> np.ndarray:
        """Dual cell values flattened to (dual cells, m, n)."""

        return self.values.reshape((-1,) + self.values.shape[-2:])

    def sup_norm(self) -> float:
        return float(np.max(np.sqrt(np.sum(self.values**2, axis=(-2, -1)))))


@dataclass(frozen=True, eq=False)
class BoundaryFaces:
    normals: np.ndarray
    points: np.ndarray
    cell: np.ndarray
    trace: sp.csr_matrix

    @property
    def count(self) -> int:
        return int(self.normals.shape[0])


@lru_cache(maxsize=32)
def boundary_faces(grid: Grid) -> BoundaryFaces:
    """
    In 1D the faces are the two end nodes; in 2D they are the boundary edges,
    whose trace is the mean of the two end nodes. `cell` is the index of the
    adjacent dual cell.
    """

    h = grid.h
    if grid.n == 1:
        (N,) = grid.shape
        normals = np.array([[-1.0], [1.0]])
        points = np.array([[0.0], [N * h]])
        cell = np.array([0, N - 1])
        trace = sp.csr_matrix(([1.0, 1.0], ([0, 1], [0, N])), shape=(2, N + 1))
        return BoundaryFaces(normals=normals, points=points, cell=cell, trace=trace)

    N1, N2 = grid.shape
    node = lambda i, j: i * (N2 + 1) + j  # noqa: E731
    # Left and bottom edges belong to lower triangles, right and top edges to upper ones.
    cell_id = lambda i, j, t: (i * N2 + j) * 2 + t  # noqa: E731
    normals: list[tuple[float, float]] = []
    points: list[tuple[float, float]] = []
    cells: list[int] = []
    ends: list[tuple[int, int]] = []
    for j in range(N2):
        normals.append((-1.0, 0.0))
        points.append((0.0, (j + 0.5) * h))
        cells.append(cell_id(0, j, 0))
        ends.append((node(0, j), node(0, j + 1)))
    for j in range(N2):
        normals.append((1.0, 0.0))
        points.append((N1 * h, (j + 0.5) * h))
        cells.append(cell_id(N1 - 1, j, 1))
        ends.append((node(N1, j), node(N1, j + 1)))
    for i in range(N1):
        normals.append((0.0, -1.0))
        points.append(((i + 0.5) * h, 0.0))
        cells.append(cell_id(i, 0, 0))
        ends.append((node(i, 0), node(i + 1, 0)))
    for i in range(N1):
        normals.append((0.0, 1.0))
        points.append(((i + 0.5) * h, N2 * h))
        cells.append(cell_id(i, N2 - 1, 1))
        ends.append((node(i, N2), node(i + 1, N2)))
    F = len(ends)
    rows = np.repeat(np.arange(F), 2)
    cols = np.array(ends).reshape(-1)
    trace = sp.csr_matrix((np.full(2 * F, 0.5), (rows, cols)), shape=(F, grid.node_count))
    return BoundaryFaces(normals=np.array(normals), points=np.array(points), cell=np.array(cells), trace=trace)


def _difference(N: int, h: float) -> sp.csr_matrix:
    return sp.diags([-np.ones(N), np.ones(N)], [0, 1], shape=(N, N + 1), format="csr") / h


def _select(N: int, offset: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(N), (np.arange(N), np.arange(N) + offset)), shape=(N, N + 1))


def _triangle_partials(N1: int, N2: int, h: float) -> list[sp.csr_matrix]:
    """
    ∂₁ and ∂₂ of the P1 interpolant on the triangles (i,j),(i+1,j),(i,j+1)
    and (i+1,j),(i,j+1),(i+1,j+1); rows are (cell * 2 + t).
    """

    cells = N1 * N2
    lower = [
        sp.kron(_difference(N1, h), _select(N2, 0), format="csr"),
        sp.kron(_select(N1, 0), _difference(N2, h), format="csr"),
    ]
    upper = [
        sp.kron(_difference(N1, h), _select(N2, 1), format="csr"),
        sp.kron(_select(N1, 1), _difference(N2, h), format="csr"),
    ]
    place = [sp.kron(sp.identity(cells, format="csr"), sp.csr_matrix(np.eye(2)[:, [t]]), format="csr") for t in (0, 1)]
    return [(place[0] @ lo + place[1] @ up).tocsr() for lo, up in zip(lower, upper)]


@lru_cache(maxsize=64)
def _assemble(key: tuple[str, int, int], A_bytes: bytes, shape: tuple[int, ...], h: float) -> sp.csr_matrix:
    _, m, n = key
    A = np.frombuffer(A_bytes, dtype=float).reshape(m * n, m * n)
    if n == 1:
        partials = [_difference(shape[0], h)]
    else:
        partials = _triangle_partials(shape[0], shape[1], h)
    full = None
    for d, partial in enumerate(partials):
        # S_d places ∂_d u^c into entry (c, d) of the cell's m x n block.
        S = sp.csr_matrix((np.ones(m), (np.arange(m) * n + d, np.arange(m))), shape=(m * n, m))
        term = sp.kron(partial, S, format="csr")
        full = term if full is None else full + term
    duals = int(np.prod(shape)) * (1 if n == 1 else 2)
    K = sp.kron(sp.identity(duals, format="csr"), sp.csr_matrix(A), format="csr") @ full
    K.eliminate_zeros()
    log.debug("assembled %s stencil on %s cells: %d nonzeros", key[0], shape, K.nnz)
    return K.tocsr()


def stencil(op: OperatorSpec, grid: Grid) -> sp.csr_matrix:
    """The sparse matrix of 𝔸: (dual cells*m*n) x (nodes*m), C-ordered."""

    if op.n != grid.n:
        raise DimensionError(f"operator acts on n={op.n}, grid has n={grid.n}")
    return _assemble(op.key, op.A.tobytes(), grid.shape, grid.h)


def trace(u: GridFunction) -> np.ndarray:
    """Boundary values per face, shape (faces, m)."""

    faces = boundary_faces(u.grid)
    return faces.trace @ u.values.reshape(-1, u.m)


def trace_matrix(op: OperatorSpec, grid: Grid) -> sp.csr_matrix:
    """B u = A((T u) ⊗ ν), one m x n block per face."""

    faces = boundary_faces(grid)
    blocks = [sp.csr_matrix(np.kron(np.eye(op.m), nu.reshape(-1, 1))) for nu in faces.normals]
    expand = sp.block_diag(blocks, format="csr")
    A = sp.kron(sp.identity(faces.count, format="csr"), sp.csr_matrix(op.A), format="csr")
    return (A @ expand @ sp.kron(faces.trace, sp.identity(op.m, format="csr"), format="csr")).tocsr()


def _check_dims(op: OperatorSpec, u: GridFunction) -> None:
    if op.n != u.grid.n or op.m != u.m:
        raise DimensionError(f"operator expects (m={op.m}, n={op.n}); got m={u.m} on an n={u.grid.n} grid")


def apply(op: OperatorSpec, u: GridFunction) -> DualField:
    _check_dims(op, u)
    K = stencil(op, u.grid)
    values = (K @ u.flat()).reshape(u.grid.dual_shape + (op.m, op.n))
    return DualField(values=values, grid=u.grid)


def adjoint_div(op: OperatorSpec, z: DualField, bc: str = NEUMANN) -> GridFunction:
    """
    Formal adjoint of 𝔸 with the sign of a divergence, -ω Kᵀz with ω the
    dual cell weight. Neumann uses only the dual cell values; trace-carrying
    adds the boundary layer as a face flux.
    """

    if bc not in BOUNDARY_MODES:
        raise ValueError(f"unknown boundary mode: {bc}")
    grid = z.grid
    K = stencil(op, grid)
    div = -grid.dual_weight * (K.T @ z.values.reshape(-1)).reshape(-1, op.m)
    if bc == TRACE_CARRYING:
        if not op.c_elliptic:
            raise OperatorError(f"{op.kind} in n={op.n} has no boundary trace")
        if z.boundary is not None:
            faces = boundary_faces(grid)
            flux = np.einsum("fcd,fd->fc", z.boundary, faces.normals)
            div = div + (faces.trace.T @ flux) / grid.h
    return GridFunction.from_flat(grid, div.reshape(-1), op.m)


def boundary_pairing(op: OperatorSpec, z: DualField, v: np.ndarray) -> float:
    """Σ_faces ⟨v, z_b ν⟩ |face| for v given per face, shape (faces, m)."""

    if not op.c_elliptic:
        raise OperatorError(f"{op.kind} in n={op.n} has no boundary trace")
    if z.boundary is None:
        return 0.0
    faces = boundary_faces(z.grid)
    flux = np.einsum("fcd,fd->fc", z.boundary, faces.normals)
    return float(np.sum(np.asarray(v).reshape(flux.shape) * flux) * z.grid.face_measure)


def inner(y: DualField, z: DualField) -> float:
    return float(np.sum(y.values * z.values) * y.grid.dual_volume)


def green_defect(op: OperatorSpec, u: GridFunction, z: DualField, bc: str = NEUMANN) -> float:
    """⟨𝔸u, z⟩ + ⟨u, div z⟩ minus the boundary pairing; zero up to rounding."""

    lhs = inner(apply(op, u), z) + float(np.sum(u.values * adjoint_div(op, z, bc).values) * u.grid.cell_volume)
    rhs = boundary_pairing(op, z, trace(u)) if bc == TRACE_CARRYING else 0.0
    return abs(lhs - rhs)


def schur_bound(K: sp.spmatrix) -> float:
    """‖K‖₂² <= ‖K‖₁ ‖K‖_∞."""

    absK = abs(K)
    return float(absK.sum(axis=0).max() * absK.sum(axis=1).max())


def lipschitz_estimate(K: sp.spmatrix, *, iters: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of ‖K‖₂², the Lipschitz constant of p -> K Kᵀ p."""

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(K.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = K.T @ (K @ x)
        est = float(np.linalg.norm(y))
        if est == 0.0:
            return 0.0
        x = y / est
    return est


def operator_norm(op: OperatorSpec, grid: Grid, *, iters: int = 50) -> float:
    """Estimated ‖𝔸‖ as a map from node values to cell values, both in ℓ²."""

    return float(np.sqrt(lipschitz_estimate(stencil(op, grid), iters=iters)))


def rigid_motion(grid: Grid, omega: float = 1.0, shift: tuple[float, float] = (0.0, 0.0)) -> GridFunction:
    """u(x) = ω(-x₂, x₁) + b, which the symmetric gradient annihilates."""

    if grid.n != 2:
        raise DimensionError("rigid motions are defined here for n = 2")
    x = grid.node_coords()
    values = np.stack([-omega * x[..., 1] + shift[0], omega * x[..., 0] + shift[1]], axis=-1)
    return GridFunction(values=values, grid=grid)
