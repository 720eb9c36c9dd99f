"""
Pointwise convex analysis for linear-growth integrands.

Every integrand in the catalog is radial: f(x, y) = φ(x, |A y|) where A is the
orthogonal projection that defines the operator's range (None means the
identity) and φ(x, ·) is convex, nondecreasing on [0, ∞). Matrices carry the
trailing two axes (m, n); any leading axes are batch axes, so one call handles
every cell of a grid.

Closed forms are used where they exist (weighted norms, the area integrand).
Everything else goes through a safeguarded Newton solve on the radial profile.
"""

from __future__ import annotations

import logging
import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import optimize

from av_flow.cantor import MAX_DEPTH, FatCantor, fat_cantor
from av_flow.errors import NonConvergenceError

if TYPE_CHECKING:
    from av_flow.diffop import Grid

log = logging.getLogger(__name__)

DOMAIN_RTOL = 1e-12
RECESSION_TOL = 1e-13
RECESSION_MAX_DOUBLINGS = 200
CONJUGATE_GAIN_TOL = 1e-10
NEWTON_MAX_ITERS = 200
DEFAULT_CANTOR_DEPTH = 9


def as_matrix(y: Any) -> np.ndarray:
    """Scalars become 1x1 matrices, vectors become m x 1 columns."""

    arr = np.asarray(y, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    return arr


def as_points(x: Any) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    return arr.reshape(1) if arr.ndim == 0 else arr


def frobenius(y: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(y * y, axis=(-2, -1)))


def project(A: np.ndarray | None, y: np.ndarray) -> np.ndarray:
    if A is None:
        return y
    m, n = y.shape[-2:]
    flat = y.reshape(y.shape[:-2] + (m * n,))
    return (flat @ A.T).reshape(y.shape)


def _direction(y: np.ndarray, norm: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = y / norm[..., None, None]
    return np.where((norm > 0)[..., None, None], unit, 0.0)


def _first_coordinate(x: np.ndarray) -> np.ndarray:
    return as_points(x)[..., 0]


# ---------------------------------------------------------------------------
# weights


class Weight(ABC):
    kind: str = "euclid-norm"

    @property
    @abstractmethod
    def ident(self) -> str: ...

    @property
    @abstractmethod
    def lo(self) -> float: ...

    @property
    @abstractmethod
    def hi(self) -> float: ...

    @abstractmethod
    def __call__(self, x: np.ndarray) -> np.ndarray: ...

    def on_cells(self, grid: Grid, relaxed: bool) -> Weight:
        return self


@dataclass(frozen=True)
class UnitWeight(Weight):
    @property
    def ident(self) -> str:
        return "euclid"

    @property
    def lo(self) -> float:
        return 1.0

    @property
    def hi(self) -> float:
        return 1.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.ones_like(_first_coordinate(x))


@dataclass(frozen=True)
class CosineWeight(Weight):
    kind = "x-weighted-norm"

    @property
    def ident(self) -> str:
        return "xweight"

    @property
    def lo(self) -> float:
        return 1.0

    @property
    def hi(self) -> float:
        return 2.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return 1.5 + 0.5 * np.cos(2.0 * math.pi * _first_coordinate(x))


@dataclass(frozen=True, eq=False)
class TabulatedWeight(Weight):
    """Per-cell weights frozen for one grid; x only contributes its batch shape."""

    values: np.ndarray
    source: str
    kind: str = "nowhere-dense-weighted"

    @property
    def ident(self) -> str:
        return self.source

    @property
    def lo(self) -> float:
        return float(np.min(self.values))

    @property
    def hi(self) -> float:
        return float(np.max(self.values))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        batch = _first_coordinate(x).shape
        if int(np.prod(batch)) == self.values.size:
            return self.values.reshape(batch)
        return np.broadcast_to(self.values, batch)


@dataclass(frozen=True, eq=False)
class CantorWeight(Weight):
    """
    w = 2 on a fat Cantor set K in the first coordinate, 1 elsewhere.

    Pointwise, K is the construction to `depth` stages. On a grid of spacing
    h the primal weight averages the fully resolved K over each cell, while
    the relaxation only sees the gaps of the first 2·log₂(1/h) - depth
    stages: a cell that meets one of those gaps drops to the background
    weight 1, every other cell keeps its average. Refining the grid by one
    halving uncovers two more stages, so the relaxed value decreases towards
    ‖𝔸u‖ while the primal value stays at 1 + |K|.
    """

    seed: int = 0
    depth: int = DEFAULT_CANTOR_DEPTH
    kind = "nowhere-dense-weighted"

    @property
    def ident(self) -> str:
        if self.depth == DEFAULT_CANTOR_DEPTH:
            return f"kweight(seed={self.seed})"
        return f"kweight(seed={self.seed},depth={self.depth})"

    @property
    def lo(self) -> float:
        return 1.0

    @property
    def hi(self) -> float:
        return 2.0

    @property
    def cantor(self) -> FatCantor:
        return fat_cantor(self.seed, depth=self.depth)

    def visible_depth(self, h: float) -> int:
        stages = int(round(2.0 * math.log2(1.0 / h))) - self.depth
        return min(max(stages, 0), MAX_DEPTH)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.cantor.contains(_first_coordinate(x)), 2.0, 1.0)

    def on_cells(self, grid: Grid, relaxed: bool) -> Weight:
        lower, upper = grid.dual_extent(0)
        resolved = fat_cantor(self.seed, resolution=grid.h)
        average = 1.0 + resolved.overlap(lower, upper) / grid.h
        if relaxed:
            visible = fat_cantor(self.seed, depth=self.visible_depth(grid.h))
            values = np.where(visible.covers(lower, upper), average, 1.0)
        else:
            values = average
        return TabulatedWeight(values=values, source=self.ident)


# ---------------------------------------------------------------------------
# integrands


class Integrand(ABC):
    """
    Radial integrand φ(x, |A y|).

    Subclasses provide the profile, its first two t-derivatives and their
    linear-growth constants; prox, conjugate and recession fall back to
    numerical routines unless overridden with a closed form.
    """

    kind: str = "euclid-norm"
    closed_form: bool = False
    superlinear: bool = False

    @property
    @abstractmethod
    def A(self) -> np.ndarray | None: ...

    @property
    @abstractmethod
    def ident(self) -> str: ...

    @property
    @abstractmethod
    def c0(self) -> float: ...

    @property
    @abstractmethod
    def C0(self) -> float: ...

    @abstractmethod
    def radial(self, x: np.ndarray, t: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def slope(self, x: np.ndarray, t: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def curvature(self, x: np.ndarray, t: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def with_projection(self, A: np.ndarray | None) -> Integrand: ...

    def on_cells(self, grid: Grid, *, relaxed: bool) -> Integrand:
        return self

    def recession_slope(self, x: np.ndarray) -> np.ndarray:
        """lim φ(x, t)/t, by doubling t until the quotient stops moving."""

        x = as_points(x)
        batch = np.shape(_first_coordinate(x))
        if self.superlinear:
            return np.full(batch, np.inf)
        t = np.full(batch, 1.0)
        prev = self.radial(x, t) / t
        for _ in range(RECESSION_MAX_DOUBLINGS):
            t = 2.0 * t
            cur = self.radial(x, t) / t
            if np.all(np.abs(cur - prev) <= RECESSION_TOL * np.maximum(1.0, np.abs(cur))):
                return cur
            prev = cur
        raise NonConvergenceError(f"recession slope of {self.ident} did not stabilise")

    def radial_prox(self, lam: Any, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        """argmin_t φ(x, t) + (t - s)²/(2 lam) over t >= 0, for s >= 0."""

        lam = np.asarray(lam, dtype=float)
        s = np.asarray(s, dtype=float)

        def g(t: np.ndarray) -> np.ndarray:
            return self.slope(x, t) + (t - s) / lam

        return _monotone_root(g, lambda t: self.curvature(x, t) + 1.0 / lam, np.zeros_like(s), s, lam)

    def radial_conjugate(self, x: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """φ*(x, s) = sup_t s t - φ(x, t) for s >= 0, as (finite, value)."""

        x = as_points(x)
        s = np.asarray(s, dtype=float)
        limit = np.broadcast_to(self.recession_slope(x), np.broadcast_shapes(s.shape, np.shape(_first_coordinate(x))))
        s = np.broadcast_to(s, limit.shape)
        finite = s <= limit * (1.0 + DOMAIN_RTOL)
        values = np.full(limit.shape, np.inf)

        at_zero = finite & (self.slope(x, np.zeros_like(s)) >= s)
        values = np.where(at_zero, -self.radial(x, np.zeros_like(s)), values)

        todo = finite & ~at_zero
        if np.any(todo):
            hi = np.ones_like(s)
            reached = np.zeros(s.shape, dtype=bool)
            for _ in range(RECESSION_MAX_DOUBLINGS):
                reached = self.slope(x, hi) >= s
                if np.all(reached | ~todo):
                    break
                hi = np.where(reached, hi, 2.0 * hi)
            interior = todo & reached
            t = _monotone_root(
                lambda t: self.slope(x, t) - s,
                lambda t: self.curvature(x, t),
                np.zeros_like(s),
                hi,
                np.ones_like(s),
            )
            values = np.where(interior, s * t - self.radial(x, t), values)
            edge = todo & ~reached
            if np.any(edge):
                values = np.where(edge, self._conjugate_at_edge(x, s), values)
        return finite, values

    def _conjugate_at_edge(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        # s sits on the boundary of the domain: the sup is a limit as t grows.
        R = np.full(s.shape, max(1.0, self.C0))
        prev = s * R - self.radial(x, R)
        for _ in range(RECESSION_MAX_DOUBLINGS):
            R = 2.0 * R
            cur = s * R - self.radial(x, R)
            if np.all(np.abs(cur - prev) <= CONJUGATE_GAIN_TOL * np.maximum(1.0, np.abs(cur))):
                return np.maximum(cur, prev)
            prev = cur
        raise NonConvergenceError(f"conjugate of {self.ident} did not stabilise at the domain edge")


def _monotone_root(g, dg, lo: np.ndarray, hi: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """
    Root of an increasing g on [lo, hi], batched. Newton steps are taken when
    they stay inside the current bracket, bisection otherwise. If g(lo) >= 0
    the root is lo.
    """

    lo = np.array(np.broadcast_to(lo, np.broadcast_shapes(np.shape(lo), np.shape(hi))), dtype=float)
    hi = np.array(np.broadcast_to(hi, lo.shape), dtype=float)
    g_lo = g(lo)
    pinned = g_lo >= 0
    hi = np.where(pinned, lo, hi)
    t = np.where(pinned, lo, 0.5 * (lo + hi))
    tol = 1e-15 * (1.0 + np.abs(hi))
    for _ in range(NEWTON_MAX_ITERS):
        gt = g(t)
        lo = np.where(gt < 0, t, lo)
        hi = np.where(gt > 0, t, hi)
        lo = np.where(gt == 0, t, lo)
        hi = np.where(gt == 0, t, hi)
        done = pinned | (np.abs(gt) * scale <= tol) | (hi - lo <= tol)
        if np.all(done):
            return t
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            newton = t - gt / dg(t)
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi)
        t = np.where(done, t, np.where(ok, newton, 0.5 * (lo + hi)))
    log.debug("radial root hit the iteration cap; bracket width %.3e", float(np.max(hi - lo)))
    return t


@dataclass(frozen=True, eq=False)
class WeightedNorm(Integrand):
    """w(x)|A y|; covers the Euclidean norm and both weighted variants."""

    weight: Weight = UnitWeight()
    projection: np.ndarray | None = None
    closed_form = True

    @property
    def kind(self) -> str:  # type: ignore[override]
        return self.weight.kind

    @property
    def A(self) -> np.ndarray | None:
        return self.projection

    @property
    def ident(self) -> str:
        return self.weight.ident

    @property
    def c0(self) -> float:
        return self.weight.lo

    @property
    def C0(self) -> float:
        return self.weight.hi

    def radial(self, x, t):
        return self.weight(x) * t

    def slope(self, x, t):
        return self.weight(x) * np.ones_like(t)

    def curvature(self, x, t):
        return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(self.weight(x))))

    def recession_slope(self, x):
        return np.asarray(self.weight(x), dtype=float)

    def radial_prox(self, lam, x, s):
        return np.maximum(np.asarray(s) - np.asarray(lam) * self.weight(x), 0.0)

    def radial_conjugate(self, x, s):
        w = self.weight(x)
        s = np.asarray(s, dtype=float)
        finite = s <= w * (1.0 + DOMAIN_RTOL)
        shape = np.broadcast_shapes(s.shape, np.shape(w))
        return np.broadcast_to(finite, shape), np.where(finite, 0.0, np.inf) * np.ones(shape)

    def with_projection(self, A):
        return replace(self, projection=A)

    def on_cells(self, grid, *, relaxed):
        return replace(self, weight=self.weight.on_cells(grid, relaxed))


@dataclass(frozen=True, eq=False)
class Area(Integrand):
    """√(1 + |A y|²)."""

    projection: np.ndarray | None = None
    kind = "area"
    closed_form = True

    @property
    def A(self):
        return self.projection

    @property
    def ident(self) -> str:
        return "area"

    @property
    def c0(self) -> float:
        return 1.0

    @property
    def C0(self) -> float:
        return 1.0

    def radial(self, x, t):
        return np.hypot(1.0, t)

    def slope(self, x, t):
        return t / np.hypot(1.0, t)

    def curvature(self, x, t):
        return np.hypot(1.0, t) ** -3

    def radial_conjugate(self, x, s):
        s = np.asarray(s, dtype=float)
        finite = s <= 1.0 + DOMAIN_RTOL
        values = np.where(finite, -np.sqrt(np.maximum(1.0 - s * s, 0.0)), np.inf)
        return finite, values

    def with_projection(self, A):
        return replace(self, projection=A)


@dataclass(frozen=True, eq=False)
class Perturbed(Integrand):
    """
    base + a(x)/(√(1+t²) + t): the bump decays like 1/(2t), so the recession
    function is the base's while the profile itself differs everywhere.
    """

    base: Integrand
    amplitude: float
    kind = "perturbed"

    @property
    def A(self):
        return self.base.A

    @property
    def ident(self) -> str:
        return f"perturbed({self.base.ident},{self.amplitude:g})"

    @property
    def c0(self) -> float:
        return self.base.c0

    @property
    def C0(self) -> float:
        return self.base.C0 + self.amplitude

    def _amp(self, x):
        return self.amplitude * 0.5 * (1.0 + np.sin(2.0 * math.pi * _first_coordinate(x)))

    def radial(self, x, t):
        return self.base.radial(x, t) + self._amp(x) / (np.hypot(1.0, t) + t)

    def slope(self, x, t):
        return self.base.slope(x, t) + self._amp(x) * (t / np.hypot(1.0, t) - 1.0)

    def curvature(self, x, t):
        return self.base.curvature(x, t) + self._amp(x) * np.hypot(1.0, t) ** -3

    def with_projection(self, A):
        return replace(self, base=self.base.with_projection(A))

    def on_cells(self, grid, *, relaxed):
        return replace(self, base=self.base.on_cells(grid, relaxed=relaxed))


@dataclass(frozen=True, eq=False)
class QPower(Integrand):
    """f^q for 1 < q <= 2; superlinear, so conjugates are finite everywhere."""

    base: Integrand
    q: float
    kind = "q-power"
    superlinear = True

    @property
    def A(self):
        return self.base.A

    @property
    def ident(self) -> str:
        return f"qpow({self.base.ident},{self.q:g})"

    @property
    def c0(self) -> float:
        return self.base.c0

    @property
    def C0(self) -> float:
        return self.base.C0

    def radial(self, x, t):
        return self.base.radial(x, t) ** self.q

    def slope(self, x, t):
        phi = self.base.radial(x, t)
        return self.q * phi ** (self.q - 1.0) * self.base.slope(x, t)

    def curvature(self, x, t):
        phi = self.base.radial(x, t)
        d1 = self.base.slope(x, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            first = self.q * (self.q - 1.0) * phi ** (self.q - 2.0) * d1 * d1
        first = np.where(np.isnan(first), np.inf, first)
        return first + self.q * phi ** (self.q - 1.0) * self.base.curvature(x, t)

    def with_projection(self, A):
        return replace(self, base=self.base.with_projection(A))

    def on_cells(self, grid, *, relaxed):
        return replace(self, base=self.base.on_cells(grid, relaxed=relaxed))


@dataclass(frozen=True, eq=False)
class MoreauEnvelope(Integrand):
    """inf_w f(w) + |w - y|²/(2 lam), evaluated through the base prox."""

    base: Integrand
    lam: float
    kind = "moreau"

    @property
    def A(self):
        return self.base.A

    @property
    def closed_form(self) -> bool:  # type: ignore[override]
        return self.base.closed_form

    @property
    def ident(self) -> str:
        return f"moreau({self.base.ident},{self.lam:g})"

    @property
    def c0(self) -> float:
        return self.base.c0

    @property
    def C0(self) -> float:
        return self.base.C0

    def radial(self, x, t):
        rho = self.base.radial_prox(self.lam, x, t)
        return self.base.radial(x, rho) + (rho - t) ** 2 / (2.0 * self.lam)

    def slope(self, x, t):
        return (np.asarray(t) - self.base.radial_prox(self.lam, x, t)) / self.lam

    def curvature(self, x, t):
        rho = self.base.radial_prox(self.lam, x, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            drho = 1.0 / (1.0 + self.lam * self.base.curvature(x, rho))
        drho = np.where(rho > 0, np.nan_to_num(drho, nan=0.0), 0.0)
        return (1.0 - drho) / self.lam

    def recession_slope(self, x):
        return self.base.recession_slope(x)

    def radial_prox(self, lam, x, s):
        lam = np.asarray(lam, dtype=float)
        s = np.asarray(s, dtype=float)
        inner = self.base.radial_prox(self.lam + lam, x, s)
        return s + lam / (self.lam + lam) * (inner - s)

    def radial_conjugate(self, x, s):
        finite, values = self.base.radial_conjugate(x, s)
        return finite, values + 0.5 * self.lam * np.asarray(s, dtype=float) ** 2

    def with_projection(self, A):
        return replace(self, base=self.base.with_projection(A))

    def on_cells(self, grid, *, relaxed):
        return replace(self, base=self.base.on_cells(grid, relaxed=relaxed))


# ---------------------------------------------------------------------------
# pointwise operations


@dataclass(frozen=True)
class ConjugateValue:
    finite: bool
    value: float | None = None
    off_range: float = 0.0


def _projected_norm(f: Integrand, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Ay = project(f.A, y)
    return Ay, frobenius(Ay)


def evaluate(f: Integrand, x: Any, y: Any) -> np.ndarray | float:
    y = as_matrix(y)
    _, t = _projected_norm(f, y)
    out = f.radial(as_points(x), t)
    return float(out) if np.ndim(out) == 0 else out


def conjugate_values(f: Integrand, x: Any, z: Any) -> tuple[np.ndarray, np.ndarray]:
    """
    Batched f*. Only the range(A) part of z is seen; callers that need the
    indicator of range(A) project z first.
    """

    z = as_matrix(z)
    _, s = _projected_norm(f, z)
    return f.radial_conjugate(as_points(x), s)


def conjugate(f: Integrand, x: Any, z: Any) -> ConjugateValue:
    """
    f*(x, Az). A z outside range(A) is projected first; the size of the
    discarded part comes back as `off_range` (the true conjugate of such a
    z is +∞, which certificates check separately).
    """

    z = as_matrix(z)
    Az = project(f.A, z)
    dropped = float(np.sqrt(np.sum((z - Az) ** 2)))
    finite, value = conjugate_values(f, x, Az)
    if not bool(np.all(finite)):
        return ConjugateValue(finite=False, off_range=dropped)
    return ConjugateValue(finite=True, value=float(np.asarray(value).reshape(-1)[0]), off_range=dropped)


def prox(f: Integrand, lam: Any, x: Any, y: Any) -> np.ndarray:
    """argmin_w f(x, w) + |w - y|²/(2 lam): (I - A)y + ρ A y/|A y|."""

    y = as_matrix(y)
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr <= 0):
        raise ValueError("prox parameter must be positive")
    Ay, t = _projected_norm(f, y)
    rho = f.radial_prox(lam_arr, as_points(x), t)
    return (y - Ay) + np.asarray(rho)[..., None, None] * _direction(Ay, t)


def prox_conjugate(f: Integrand, sigma: Any, x: Any, v: Any) -> np.ndarray:
    """prox of sigma f*, by the Moreau identity; lands in dom f* ∩ range(A)."""

    v = as_matrix(v)
    sigma = np.asarray(sigma, dtype=float)
    return v - sigma[..., None, None] * prox(f, 1.0 / sigma, x, v / sigma[..., None, None])


def moreau(f: Integrand, lam: float, x: Any, y: Any) -> float | np.ndarray:
    y = as_matrix(y)
    p = prox(f, lam, x, y)
    out = np.asarray(evaluate(f, x, p)) + np.sum((p - y) ** 2, axis=(-2, -1)) / (2.0 * lam)
    return float(out) if np.ndim(out) == 0 else out


def recession(f: Integrand, x: Any, y: Any) -> float | np.ndarray:
    y = as_matrix(y)
    _, t = _projected_norm(f, y)
    slope = f.recession_slope(as_points(x))
    with np.errstate(invalid="ignore"):
        out = np.where(t > 0, t * slope, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def subgradient(f: Integrand, x: Any, y: Any) -> np.ndarray:
    """Minimal-norm element of ∂f(x, y); zero at y = 0."""

    y = as_matrix(y)
    Ay, t = _projected_norm(f, y)
    slope = np.where(t > 0, f.slope(as_points(x), t), 0.0)
    return slope[..., None, None] * _direction(Ay, t)


def biconjugate(f: Integrand, x: Any, y: Any) -> float:
    """f**(x, y) = sup_s s|A y| - φ*(x, s), one point at a time."""

    y = as_matrix(y)
    xs = as_points(x)
    _, t = _projected_norm(f, y)
    t = float(t)
    cap = float(np.asarray(f.recession_slope(xs)).reshape(-1)[0])
    upper = min(2.0 * float(np.asarray(f.slope(xs, np.asarray(t))).reshape(-1)[0]) + 1.0, cap)

    def objective(s: float) -> float:
        _, value = f.radial_conjugate(xs, np.asarray(s))
        return -(s * t - float(np.asarray(value).reshape(-1)[0]))

    res = optimize.minimize_scalar(objective, bounds=(0.0, upper), method="bounded", options={"xatol": 1e-12})
    return max(-float(res.fun), -objective(upper), -objective(0.0))


def qpower(f: Integrand, q: float) -> QPower:
    if not 1.0 < q <= 2.0:
        raise ValueError(f"q must lie in (1, 2], got {q}")
    return QPower(base=f, q=float(q))


def moreau_integrand(f: Integrand, lam: float) -> MoreauEnvelope:
    if lam <= 0:
        raise ValueError(f"Moreau parameter must be positive, got {lam}")
    return MoreauEnvelope(base=f, lam=float(lam))


def perturbed(f: Integrand, amplitude: float) -> Perturbed:
    if amplitude < 0:
        raise ValueError(f"perturbation amplitude must be non-negative, got {amplitude}")
    # The bump lowers the slope at t = 0 by up to the amplitude; φ must stay nondecreasing.
    samples = np.linspace(0.0, 1.0, 65)[:, None]
    floor = float(np.min(f.slope(samples, np.zeros(65))))
    if amplitude > floor:
        raise ValueError(f"perturbation amplitude {amplitude} exceeds the base slope at 0 ({floor})")
    return Perturbed(base=f, amplitude=float(amplitude))


# ---------------------------------------------------------------------------
# catalog ids: euclid, area, xweight, kweight(seed=7), qpow(euclid,1.5), ...

_CALL_RE = re.compile(r"^\s*(?P<name>[a-z_]+)\s*(?:\((?P<args>.*)\))?\s*$", re.DOTALL)


def _split_args(text: str) -> list[str]:
    parts: list[str] = []
    depth = 0
    cur = ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
            continue
        cur += ch
    if cur.strip():
        parts.append(cur.strip())
    return parts


def _kwargs(parts: list[str], ident: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for part in parts:
        key, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"expected key=value in integrand id: {ident}")
        out[key.strip()] = value.strip()
    return out


def parse_integrand(ident: str) -> Integrand:
    m = _CALL_RE.match(ident)
    if not m:
        raise ValueError(f"malformed integrand id: {ident!r}")
    name = m.group("name")
    args = _split_args(m.group("args") or "")

    try:
        if name == "euclid" and not args:
            return WeightedNorm()
        if name == "xweight" and not args:
            return WeightedNorm(weight=CosineWeight())
        if name == "area" and not args:
            return Area()
        if name == "kweight":
            kw = _kwargs(args, ident)
            unknown = set(kw) - {"seed", "depth"}
            if unknown:
                raise ValueError(f"unknown kweight keys {sorted(unknown)}")
            depth = int(kw.get("depth", DEFAULT_CANTOR_DEPTH))
            return WeightedNorm(weight=CantorWeight(seed=int(kw.get("seed", 0)), depth=depth))
        if name in {"qpow", "moreau", "perturbed"} and len(args) == 2:
            base = parse_integrand(args[0])
            value = float(args[1])
            if name == "qpow":
                return qpower(base, value)
            if name == "moreau":
                return moreau_integrand(base, value)
            return perturbed(base, value)
    except (TypeError, ValueError) as e:
        raise ValueError(f"bad integrand id {ident!r}: {e}") from e
    raise ValueError(f"unknown integrand id: {ident!r}")
