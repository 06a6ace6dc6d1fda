"""Fit criteria, observed datasets, and the ODE-fidelity penalty.

The data criterion for a trajectory x is

    data_fit(x) = -(1/n) * sum_i sum_{observed c} g(Y_ic, x_c(T_i)),

always <= 0, and the penalty is the integrated squared ODE residual

    ode_penalty = sum_c weight_c * integral_0^T (x_c'(t) - field_c(x(t), t, theta))^2 dt,

evaluated by composite Simpson on a partition that refines the spline
grid (so knots are always partition points).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EvaluationError, UsageError
from .ode_model import OdeSystem, eval_field_many, eval_partials_many
from .spline import KnotGrid, SplineFunction, basis_matrix, refine_partition, simpson_weights

__all__ = [
    "FitCriterion",
    "Dataset",
    "Quadrature",
    "gaussian_criterion",
    "logistic_criterion",
    "quadrature_for",
    "data_fit",
    "ode_penalty",
    "penalty_gradient",
]


@dataclass(frozen=True)
class FitCriterion:
    """Per-observation loss g(y, x) with its first two x-derivatives.

    All three evaluators are vectorized over numpy arrays and g is
    nonnegative everywhere.
    """

    name: str
    g: Callable
    dg_dx: Callable
    d2g_dx2: Callable


def gaussian_criterion() -> FitCriterion:
    """Squared-error criterion g(y, x) = (y - x)^2."""
    return FitCriterion(
        name="gaussian",
        g=lambda y, x: (y - x) ** 2,
        dg_dx=lambda y, x: -2.0 * (y - x),
        d2g_dx2=lambda y, x: 2.0 * np.ones_like(np.asarray(x, dtype=float)),
    )


def _check_binary(y):
    y = np.asarray(y)
    if np.any((y != 0) & (y != 1) & ~np.isnan(y)):
        raise UsageError("logistic criterion requires observations in {0, 1}")


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _logistic_g(y, x):
    _check_binary(y)
    return _softplus(x) - np.asarray(x, dtype=float) * y


def _logistic_dg(y, x):
    _check_binary(y)
    return _sigmoid(x) - y


def _logistic_d2g(y, x):
    _check_binary(y)
    e = np.exp(-np.abs(np.asarray(x, dtype=float)))
    return e / (1.0 + e) ** 2


def logistic_criterion() -> FitCriterion:
    """Bernoulli log-loss g(y, x) = log(1 + e^x) - x*y, stable for |x| >= 30."""
    return FitCriterion(
        name="logistic", g=_logistic_g, dg_dx=_logistic_dg, d2g_dx2=_logistic_d2g
    )


@dataclass(frozen=True)
class Dataset:
    """Observation times plus an (n, d3) value matrix.

    ``observations[i, c]`` is NaN when component column c is missing at time
    i; missing cells are excluded from the fit criterion.
    ``observed_components[c]`` maps value column c to a state-component
    index.  One criterion per column, Gaussian by default.
    """

    times: np.ndarray
    observations: np.ndarray
    observed_components: tuple
    criteria: tuple = field(default=())

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        obs = np.asarray(self.observations, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise UsageError("need at least one observation time")
        if obs.ndim != 2 or obs.shape[0] != times.size:
            raise UsageError("observations must be (n_times, n_columns)")
        comps = tuple(int(c) for c in self.observed_components)
        if len(comps) != obs.shape[1]:
            raise UsageError("one observed component index per value column")
        if len(set(comps)) != len(comps):
            raise UsageError("observed component indices must be distinct")
        if any(c < 0 for c in comps):
            raise UsageError("observed component indices must be nonnegative")
        if np.any(times < 0):
            raise UsageError("observation times must be nonnegative")
        crits = tuple(self.criteria) if self.criteria else tuple(
            gaussian_criterion() for _ in comps
        )
        if len(crits) != len(comps):
            raise UsageError("one criterion per value column")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "observed_components", comps)
        object.__setattr__(self, "criteria", crits)

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def n_columns(self) -> int:
        return self.observations.shape[1]

    def save_csv(self, path, n_state_columns: Optional[int] = None):
        """Write the bit-exact CSV format: header t,y1,...,yd; one row per
        time; missing cells empty; LF endings; repr-formatted floats."""
        d = n_state_columns or (max(self.observed_components) + 1)
        lines = ["t," + ",".join(f"y{j + 1}" for j in range(d))]
        for i in range(self.n):
            cells = [""] * d
            for c, comp in enumerate(self.observed_components):
                v = self.observations[i, c]
                cells[comp] = repr(float(v)) if np.isfinite(v) else ""
            lines.append(repr(float(self.times[i])) + "," + ",".join(cells))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load_csv(cls, path, criteria=None) -> "Dataset":
        """Parse the CSV format written by save_csv.

        Columns that are empty in every row are dropped from the observed
        set; column y{j} maps to state component j-1.
        """
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip() != ""]
        if not lines:
            raise UsageError(f"{path}: empty dataset file")
        header = lines[0].split(",")
        if header[0] != "t" or any(
            h != f"y{j + 1}" for j, h in enumerate(header[1:])
        ) or len(header) < 2:
            raise UsageError(
                f"{path}: malformed header {lines[0]!r}; expected 't,y1,...,yd'"
            )
        d = len(header) - 1
        times = []
        rows = []
        for k, ln in enumerate(lines[1:], start=2):
            cells = ln.split(",")
            if len(cells) != d + 1:
                raise UsageError(f"{path}:{k}: expected {d + 1} fields, got {len(cells)}")
            try:
                times.append(float(cells[0]))
                rows.append([float(c) if c != "" else np.nan for c in cells[1:]])
            except ValueError as exc:
                raise UsageError(f"{path}:{k}: unparseable number") from exc
        obs = np.asarray(rows, dtype=float)
        keep = [j for j in range(d) if np.any(np.isfinite(obs[:, j]))]
        if not keep:
            raise UsageError(f"{path}: no observed values in any column")
        if criteria is not None and len(criteria) != len(keep):
            raise UsageError("one criterion per observed column")
        return cls(
            times=np.asarray(times),
            observations=obs[:, keep],
            observed_components=tuple(keep),
            criteria=tuple(criteria) if criteria else (),
        )


def data_fit(data: Dataset, trajs: Sequence[Callable]) -> float:
    """The data criterion -(1/n) sum_i sum_c g(Y_ic, traj_c(T_i)); always <= 0."""
    total = 0.0
    for c, comp in enumerate(data.observed_components):
        y = data.observations[:, c]
        mask = np.isfinite(y)
        if not np.any(mask):
            continue
        x = np.asarray(trajs[comp](data.times[mask]), dtype=float)
        gv = np.asarray(data.criteria[c].g(y[mask], x), dtype=float)
        if not np.all(np.isfinite(gv)):
            bad = int(np.flatnonzero(~np.isfinite(gv))[0])
            idx = int(np.flatnonzero(mask)[bad])
            raise EvaluationError(
                "non-finite loss value", observation_index=idx, column=c
            )
        total += float(np.sum(gv))
    return -total / data.n


@dataclass(frozen=True)
class Quadrature:
    """Simpson partition derived from a spline grid, with node weights and
    cached basis/derivative design matrices."""

    grid: KnotGrid
    nodes: np.ndarray
    weights: np.ndarray
    basis: object
    dbasis: object


def quadrature_for(grid: KnotGrid, subdiv: int = 4) -> Quadrature:
    """Build the penalty quadrature for a grid (``subdiv`` even sub-intervals
    per knot cell, default 4)."""
    nodes = refine_partition(grid, subdiv)
    return Quadrature(
        grid=grid,
        nodes=nodes,
        weights=simpson_weights(nodes),
        basis=basis_matrix(grid, nodes, deriv=0),
        dbasis=basis_matrix(grid, nodes, deriv=1),
    )


def _coerce_quadrature(grid: KnotGrid, quadrature) -> Quadrature:
    if quadrature is None:
        return quadrature_for(grid)
    if isinstance(quadrature, Quadrature):
        if quadrature.grid is not grid and tuple(quadrature.grid.breakpoints) != tuple(
            grid.breakpoints
        ):
            raise UsageError("quadrature was built for a different grid")
        return quadrature
    raise UsageError("quadrature must be a Quadrature from quadrature_for()")


def _spline_stack(splines: Sequence[SplineFunction], system: OdeSystem):
    if len(splines) != system.dim_state:
        raise UsageError(
            f"need one spline per state component ({system.dim_state}), got {len(splines)}"
        )
    grid = splines[0].grid
    for s in splines[1:]:
        if tuple(s.grid.breakpoints) != tuple(grid.breakpoints) or s.grid.order != grid.order:
            raise UsageError("all component splines must share one grid")
    coeffs = np.column_stack([s.coeffs for s in splines])
    return grid, coeffs


def _residuals(system, grid, coeffs, params, quad):
    states = quad.basis @ coeffs
    dstates = quad.dbasis @ coeffs
    fields = eval_field_many(system, states, quad.nodes, params)
    if not np.all(np.isfinite(fields)):
        bad = int(np.flatnonzero(~np.isfinite(fields).all(axis=1))[0])
        raise EvaluationError(
            f"field of '{system.name}' non-finite at quadrature node",
            t=float(quad.nodes[bad]),
            state=states[bad].tolist(),
        )
    return states, dstates - fields


def ode_penalty(
    system: OdeSystem,
    splines: Sequence[SplineFunction],
    params,
    quadrature: Optional[Quadrature] = None,
    component_weights=None,
) -> float:
    """Integrated squared ODE residual of the spline trajectory; >= 0."""
    grid, coeffs = _spline_stack(splines, system)
    quad = _coerce_quadrature(grid, quadrature)
    params = np.asarray(params, dtype=float)
    w = _component_weights(component_weights, system.dim_state)
    _, resid = _residuals(system, grid, coeffs, params, quad)
    return float(np.einsum("q,qc,c->", quad.weights, resid**2, w))


def _component_weights(component_weights, d):
    if component_weights is None:
        return np.ones(d)
    w = np.asarray(component_weights, dtype=float)
    if w.shape != (d,) or np.any(w < 0):
        raise UsageError("component_weights must be d nonnegative reals")
    return w


def penalty_gradient(
    system: OdeSystem,
    splines: Sequence[SplineFunction],
    params,
    quadrature: Optional[Quadrature] = None,
    component_weights=None,
    with_params: bool = False,
):
    """Gradient of the penalty with respect to every spline coefficient.

    Returns an (n_basis, dim_state) array (column k is the gradient for
    component k's coefficients); with ``with_params`` also the gradient
    with respect to the system parameters.
    """
    grid, coeffs = _spline_stack(splines, system)
    quad = _coerce_quadrature(grid, quadrature)
    params = np.asarray(params, dtype=float)
    w = _component_weights(component_weights, system.dim_state)
    states, resid = _residuals(system, grid, coeffs, params, quad)
    jac_x, jac_p = eval_partials_many(system, states, quad.nodes, params)
    wres = quad.weights[:, None] * resid * w[None, :]
    grad = 2.0 * (quad.dbasis.T @ wres)
    # chain rule through the field: -2 * Phi^T sum_c wres_c * dfield_c/dx_k
    grad -= 2.0 * (quad.basis.T @ np.einsum("qc,qck->qk", wres, jac_x))
    if not with_params:
        return grad
    grad_p = -2.0 * np.einsum("qc,qca->a", wres, jac_p)
    return grad, grad_p
