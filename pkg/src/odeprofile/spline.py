"""Clamped B-spline bases, spline functions, interpolation and quadrature.

The approximation space is spanned by B-splines on a clamped (open) knot
vector: each endpoint breakpoint is repeated ``order`` times, so the value
at t=0 equals the first coefficient and the value at t=T the last.  For
``order`` 4 (cubic, the default) the basis dimension is
``len(breakpoints) + 2``.

Derivatives are never formed by numerical differencing: the derivative of
a spline of order p is the spline of order p-1 whose coefficients are the
scaled first differences of the original coefficients, evaluated on the
knot vector with one knot dropped at each end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainError, UsageError

__all__ = [
    "KnotGrid",
    "SplineFunction",
    "make_grid",
    "eval_basis",
    "basis_matrix",
    "eval_spline",
    "integral_of_basis",
    "interpolate",
    "refine_partition",
    "simpson",
    "simpson_weights",
]


@dataclass(frozen=True)
class KnotGrid:
    """Strictly increasing breakpoints 0 = t_1 < ... < t_k = T plus an order."""

    breakpoints: tuple
    order: int = 4

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.ndim != 1 or bp.size < 2:
            raise UsageError("need at least 2 breakpoints")
        if bp[0] != 0.0:
            raise UsageError("first breakpoint must be 0")
        if np.any(np.diff(bp) <= 0):
            raise UsageError("breakpoints must be strictly increasing")
        if self.order < 2:
            raise UsageError("order must be >= 2")
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in bp))

    @property
    def horizon(self) -> float:
        return self.breakpoints[-1]

    @property
    def n_breakpoints(self) -> int:
        return len(self.breakpoints)

    @property
    def n_basis(self) -> int:
        return len(self.breakpoints) + self.order - 2

    @cached_property
    def knots(self) -> np.ndarray:
        """Clamped knot vector: order-fold repetition of both endpoints."""
        bp = np.asarray(self.breakpoints)
        return np.concatenate(
            [np.full(self.order, bp[0]), bp[1:-1], np.full(self.order, bp[-1])]
        )

    @cached_property
    def mesh_width(self) -> float:
        """|tau| = largest gap between consecutive breakpoints."""
        return float(np.max(np.diff(self.breakpoints)))

    @cached_property
    def mesh_ratio(self) -> float:
        """kappa = largest gap over smallest gap (>= 1)."""
        gaps = np.diff(self.breakpoints)
        return float(np.max(gaps) / np.min(gaps))


def make_grid(breakpoints, order: int = 4) -> KnotGrid:
    """Build a KnotGrid from breakpoints (first must be 0)."""
    return KnotGrid(breakpoints=tuple(np.asarray(breakpoints, dtype=float)), order=order)


def _check_domain(grid: KnotGrid, ts: np.ndarray):
    T = grid.horizon
    tol = 1e-12 * max(1.0, T)
    if np.any(ts < -tol) or np.any(ts > T + tol):
        bad = ts[(ts < -tol) | (ts > T + tol)]
        raise DomainError(f"evaluation point {bad.flat[0]} outside [0, {T}]")


def _find_spans(knots: np.ndarray, order: int, ts: np.ndarray) -> np.ndarray:
    degree = order - 1
    spans = np.searchsorted(knots, ts, side="right") - 1
    return np.clip(spans, degree, len(knots) - order - 1)


def _basis_values_many(knots: np.ndarray, order: int, ts: np.ndarray):
    """Nonzero B-spline basis values of the given order at each t.

    Returns (first_index, values) with values of shape (n, order); the
    nonzero bases at ts[i] are first_index[i] .. first_index[i]+order-1.
    Cox-de Boor recursion, data-parallel over evaluation points; zero-width
    spans (repeated knots) contribute zero terms.
    """
    degree = order - 1
    ts = np.asarray(ts, dtype=float)
    spans = _find_spans(knots, order, ts)
    n = ts.size
    vals = np.ones((n, 1))
    left = np.empty((n, degree + 1))
    right = np.empty((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = ts - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - ts
        saved = np.zeros(n)
        new = np.empty((n, j + 1))
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            with np.errstate(divide="ignore", invalid="ignore"):
                temp = np.where(denom != 0.0, vals[:, r] / np.where(denom == 0, 1, denom), 0.0)
            new[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        new[:, j] = saved
        vals = new
    return spans - degree, vals


def eval_basis(grid: KnotGrid, t: float):
    """Nonzero basis values at a single point.

    Returns (first_active_index, values) where values has length
    ``grid.order``; the values sum to 1 (partition of unity).
    """
    ts = np.asarray([float(t)])
    _check_domain(grid, ts)
    first, vals = _basis_values_many(grid.knots, grid.order, ts)
    return int(first[0]), vals[0]


def _derivative_operator(knots: np.ndarray, order: int, n_coef: int) -> sp.csr_matrix:
    """Matrix mapping order-p coefficients to the (p-1)-order derivative
    spline coefficients on knots[1:-1]."""
    degree = order - 1
    denom = knots[order : order + n_coef - 1] - knots[1:n_coef]
    w = np.where(denom != 0.0, degree / np.where(denom == 0, 1, denom), 0.0)
    rows = np.repeat(np.arange(n_coef - 1), 2)
    cols = np.empty(2 * (n_coef - 1), dtype=int)
    cols[0::2] = np.arange(n_coef - 1)
    cols[1::2] = np.arange(1, n_coef)
    data = np.empty(2 * (n_coef - 1))
    data[0::2] = -w
    data[1::2] = w
    return sp.csr_matrix((data, (rows, cols)), shape=(n_coef - 1, n_coef))


def _derivative_chain(grid: KnotGrid, deriv: int):
    """Knot vector, order and total coefficient operator after ``deriv``
    differentiations."""
    knots = grid.knots
    order = grid.order
    m = grid.n_basis
    op = sp.identity(m, format="csr")
    for _ in range(deriv):
        op = _derivative_operator(knots, order, m) @ op
        knots = knots[1:-1]
        order -= 1
        m -= 1
    return knots, order, op


def basis_matrix(grid: KnotGrid, ts, deriv: int = 0) -> sp.csr_matrix:
    """Sparse matrix B with B[i, j] = d^deriv phi_j / dt^deriv (ts[i]).

    Shape (len(ts), grid.n_basis); at most ``order - deriv`` nonzeros per row.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    _check_domain(grid, ts)
    if deriv < 0 or deriv > grid.order - 2:
        raise UsageError(f"deriv={deriv} not in [0, order-2] for order {grid.order}")
    knots, order, op = _derivative_chain(grid, deriv)
    first, vals = _basis_values_many(knots, order, ts)
    n = ts.size
    rows = np.repeat(np.arange(n), order)
    cols = (first[:, None] + np.arange(order)[None, :]).ravel()
    lower = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, grid.n_basis - deriv))
    return (lower @ op).tocsr()


class SplineFunction:
    """A spline: grid plus coefficient vector of length grid.n_basis.

    Immutable; derivative splines are materialized lazily and cached.
    """

    def __init__(self, grid: KnotGrid, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (grid.n_basis,):
            raise UsageError(
                f"coeffs must have length {grid.n_basis}, got {coeffs.shape}"
            )
        self.grid = grid
        self.coeffs = coeffs.copy()
        self.coeffs.flags.writeable = False
        self._chains = {}

    def __call__(self, ts, deriv: int = 0):
        scalar = np.isscalar(ts) or np.ndim(ts) == 0
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        _check_domain(self.grid, ts)
        if deriv < 0 or deriv > self.grid.order - 2:
            raise UsageError(
                f"deriv={deriv} not in [0, order-2] for order {self.grid.order}"
            )
        if deriv not in self._chains:
            knots, order, op = _derivative_chain(self.grid, deriv)
            self._chains[deriv] = (knots, order, op @ self.coeffs)
        knots, order, coeffs = self._chains[deriv]
        first, vals = _basis_values_many(knots, order, ts)
        idx = first[:, None] + np.arange(order)[None, :]
        out = np.einsum("ij,ij->i", vals, coeffs[idx])
        return float(out[0]) if scalar else out

    def value_at_start(self) -> float:
        """Value at t=0; equals the first coefficient (clamped convention)."""
        return float(self.coeffs[0])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "breakpoints": list(self.grid.breakpoints),
            "order": self.grid.order,
            "coeffs": self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineFunction":
        return cls(make_grid(d["breakpoints"], order=d["order"]), d["coeffs"])

    @classmethod
    def from_json(cls, s: str) -> "SplineFunction":
        return cls.from_dict(json.loads(s))


def eval_spline(f: SplineFunction, t, deriv_order: int = 0):
    """Evaluate a spline or one of its derivatives (deriv_order <= order-2)."""
    return f(t, deriv=deriv_order)


def integral_of_basis(grid: KnotGrid, basis_index: int) -> float:
    """Exact integral of one basis function: (t_{i+order} - t_i) / order."""
    if not 0 <= basis_index < grid.n_basis:
        raise UsageError(
            f"basis index {basis_index} out of range [0, {grid.n_basis})"
        )
    knots = grid.knots
    return float(knots[basis_index + grid.order] - knots[basis_index]) / grid.order


def interpolate(grid: KnotGrid, values, end_derivs) -> SplineFunction:
    """Complete cubic spline interpolation on the grid's breakpoints.

    ``values`` holds one sample per breakpoint; ``end_derivs`` the first
    derivatives at both endpoints (the clamped/complete end conditions).
    For f in C^4 the sup error is bounded by (5/384)*||f''''||*|tau|^4 and
    the derivative error by ((9+sqrt(3))/216)*||f''''||*|tau|^3.
    """
    if grid.order != 4:
        raise UsageError("complete-spline interpolation requires order 4 (cubic)")
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_breakpoints,):
        raise UsageError(
            f"need one value per breakpoint ({grid.n_breakpoints}), got {values.shape}"
        )
    try:
        d0, dT = (float(end_derivs[0]), float(end_derivs[1]))
    except (TypeError, IndexError) as exc:
        raise UsageError("end_derivs must supply both endpoint derivatives") from exc
    bp = np.asarray(grid.breakpoints)
    A_val = basis_matrix(grid, bp, deriv=0)
    A_der = basis_matrix(grid, np.array([bp[0], bp[-1]]), deriv=1)
    A = sp.vstack([A_val, A_der]).tocsc()
    rhs = np.concatenate([values, [d0, dT]])
    coeffs = spla.spsolve(A, rhs)
    if not np.all(np.isfinite(coeffs)):
        raise UsageError("interpolation system is singular on this grid")
    return SplineFunction(grid, coeffs)


def refine_partition(grid: KnotGrid, subdiv: int = 4) -> np.ndarray:
    """Quadrature partition: every knot cell split into ``subdiv`` equal
    sub-intervals.  ``subdiv`` must be even so Simpson panels never straddle
    a knot."""
    if subdiv < 2 or subdiv % 2 != 0:
        raise UsageError("subdiv must be an even integer >= 2")
    bp = np.asarray(grid.breakpoints)
    pieces = [np.linspace(bp[i], bp[i + 1], subdiv + 1)[:-1] for i in range(len(bp) - 1)]
    return np.concatenate(pieces + [bp[-1:]])


def _panelize(partition: np.ndarray):
    partition = np.asarray(partition, dtype=float)
    if partition.size < 3:
        raise UsageError("partition needs at least 3 nodes (one Simpson panel)")
    if partition.size % 2 == 0:
        raise UsageError("partition must contain an even number of intervals")
    if np.any(np.diff(partition) <= 0):
        raise UsageError("partition nodes must be strictly increasing")
    a = partition[0:-2:2]
    m = partition[1:-1:2]
    b = partition[2::2]
    if np.any(np.abs(m - 0.5 * (a + b)) > 1e-9 * np.maximum(1.0, b - a)):
        raise UsageError("each Simpson panel midpoint must bisect its panel")
    return a, m, b


def simpson_weights(partition) -> np.ndarray:
    """Node weights w with  integral = sum_q w_q f(partition_q)  under
    composite Simpson; weights of shared panel endpoints accumulate."""
    partition = np.asarray(partition, dtype=float)
    a, m, b = _panelize(partition)
    h = (b - a) / 6.0
    w = np.zeros_like(partition)
    w[0:-2:2] += h
    w[1:-1:2] += 4.0 * h
    w[2::2] += h
    return w


def simpson(integrand, partition) -> float:
    """Composite Simpson quadrature over the partition nodes.

    Exact for integrands that are polynomials of degree <= 3 on each panel
    (so for piecewise cubics aligned with the partition).
    """
    partition = np.asarray(partition, dtype=float)
    w = simpson_weights(partition)
    try:
        fv = np.asarray(integrand(partition), dtype=float)
        if fv.shape != partition.shape:
            raise TypeError
    except (TypeError, ValueError):
        fv = np.array([float(integrand(t)) for t in partition])
    return float(w @ fv)
