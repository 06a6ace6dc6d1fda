"""The inner problem: penalized spline smoothing at fixed parameters.

Given parameters, initial values and a smoothing weight ``lam``, maximize

    data_fit(splines) - lam * ode_penalty(splines, params)

over the spline coefficients, with each component's value at t=0 pinned
to the requested initial value (an exact coefficient constraint under the
clamped basis).  The maximization runs as a damped Gauss-Newton /
Levenberg-Marquardt descent on the negated objective; general (non
Gaussian) criteria use their second derivative in the data block, which
keeps the step matrix positive semidefinite.

Non-convergence within ``max_iter`` is reported (``converged=False``),
not raised; persistent field blow-ups at quadrature nodes raise
DivergenceError carrying the last finite iterate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .criteria import Dataset, Quadrature, quadrature_for
from .errors import DivergenceError, EvaluationError, UsageError
from .ode_model import OdeSystem, eval_field_many, eval_partials_many
from .spline import KnotGrid, SplineFunction, basis_matrix

__all__ = [
    "InnerProblem",
    "InnerSolution",
    "SmootherWorkspace",
    "solve_inner",
    "inner_objective_parts",
    "cold_start_coefficients",
]


@dataclass(frozen=True)
class InnerProblem:
    system: OdeSystem
    data: Dataset
    grid: KnotGrid
    params: np.ndarray
    init_values: np.ndarray
    lam: float
    grad_tol: float = 1e-8
    max_iter: int = 200
    component_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        params = np.asarray(self.params, dtype=float)
        init = np.asarray(self.init_values, dtype=float)
        if params.shape != (self.system.dim_params,):
            raise UsageError(
                f"params must have shape ({self.system.dim_params},), got {params.shape}"
            )
        if init.shape != (self.system.dim_state,):
            raise UsageError(
                f"init_values must have shape ({self.system.dim_state},)"
            )
        if not self.lam > 0:
            raise UsageError("lambda must be positive")
        if abs(self.grid.horizon - self.system.time_horizon) > 1e-9 * max(
            1.0, self.system.time_horizon
        ):
            raise UsageError("grid must end at the system time horizon")
        if any(
            c >= self.system.dim_state for c in self.data.observed_components
        ):
            raise UsageError("dataset observes a component the system lacks")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "init_values", init)


@dataclass
class InnerSolution:
    splines: list
    coeffs: np.ndarray
    objective: float
    H_value: float
    J_value: float
    converged: bool
    iterations: int


class SmootherWorkspace:
    """Precomputed design matrices shared by every solve on one
    (system, data, grid) triple."""

    def __init__(self, system: OdeSystem, data: Dataset, grid: KnotGrid, subdiv: int = 4):
        self.system = system
        self.data = data
        self.grid = grid
        self.quad = quadrature_for(grid, subdiv)
        self.m = grid.n_basis
        self.d = system.dim_state
        phi_obs = basis_matrix(grid, data.times)
        self.columns = []
        for c, comp in enumerate(data.observed_components):
            mask = np.isfinite(data.observations[:, c])
            self.columns.append(
                {
                    "comp": comp,
                    "crit": data.criteria[c],
                    "y": data.observations[mask, c],
                    "phi": phi_obs[np.flatnonzero(mask)].tocsr(),
                }
            )
        free = np.ones(self.m * self.d, dtype=bool)
        free[:: self.m] = False  # first coefficient of each component is pinned
        self.free = np.flatnonzero(free)

    # -- objective pieces ---------------------------------------------------

    def data_value_grad(self, coeffs, want_grad=True):
        """(H, grad_H (m, d), hess_blocks): the data criterion H, its
        coefficient gradient, and per-component Hessian blocks of -H
        (positive semidefinite for convex-in-x criteria)."""
        n = self.data.n
        H = 0.0
        grad = np.zeros((self.m, self.d)) if want_grad else None
        blocks = [None] * self.d if want_grad else None
        for col in self.columns:
            x = col["phi"] @ coeffs[:, col["comp"]]
            gv = np.asarray(col["crit"].g(col["y"], x), dtype=float)
            if not np.all(np.isfinite(gv)):
                raise EvaluationError(
                    "non-finite loss during smoothing",
                    column=col["comp"],
                )
            H -= float(np.sum(gv)) / n
            if want_grad:
                dg = np.asarray(col["crit"].dg_dx(col["y"], x), dtype=float)
                d2g = np.asarray(col["crit"].d2g_dx2(col["y"], x), dtype=float)
                grad[:, col["comp"]] -= (col["phi"].T @ dg) / n
                blk = (col["phi"].T @ sp.diags(d2g / n) @ col["phi"]).tocsr()
                k = col["comp"]
                blocks[k] = blk if blocks[k] is None else blocks[k] + blk
        return H, grad, blocks

    def penalty_pieces(self, coeffs, params, want_grad=True, comp_weights=None):
        """(J, grad_J (m,d), jac or None): penalty value, gradient, and the
        sparse residual Jacobian (d*Q, d*m) for the Gauss-Newton block."""
        quad = self.quad
        w = np.ones(self.d) if comp_weights is None else comp_weights
        states = quad.basis @ coeffs
        dstates = quad.dbasis @ coeffs
        fields = eval_field_many(self.system, states, quad.nodes, params)
        if not np.all(np.isfinite(fields)):
            bad = int(np.flatnonzero(~np.isfinite(fields).all(axis=1))[0])
            raise EvaluationError(
                "field non-finite at quadrature node",
                t=float(quad.nodes[bad]),
            )
        resid = dstates - fields
        J = float(np.einsum("q,qc,c->", quad.weights, resid**2, w))
        if not want_grad:
            return J, None, None
        jac_x, _ = eval_partials_many(self.system, states, quad.nodes, params)
        wres = quad.weights[:, None] * resid * w[None, :]
        grad = 2.0 * (quad.dbasis.T @ wres)
        grad -= 2.0 * (quad.basis.T @ np.einsum("qc,qck->qk", wres, jac_x))
        rows = []
        for c in range(self.d):
            row = []
            for k in range(self.d):
                a = sp.diags(-jac_x[:, c, k]) @ quad.basis
                if c == k:
                    a = quad.dbasis + a
                row.append(a)
            rows.append(row)
        return J, grad, sp.bmat(rows, format="csr")

    def weighted_quad_diag(self, comp_weights=None):
        """diag(concat_c w_c * simpson_weights) for the Gauss-Newton block."""
        if comp_weights is None:
            return sp.diags(np.tile(self.quad.weights, self.d))
        return sp.diags(
            np.concatenate([wc * self.quad.weights for wc in comp_weights])
        )

    def objective_parts(self, coeffs, params, comp_weights=None):
        H, _, _ = self.data_value_grad(coeffs, want_grad=False)
        J, _, _ = self.penalty_pieces(
            coeffs, params, want_grad=False, comp_weights=comp_weights
        )
        return H, J


def cold_start_coefficients(ws: SmootherWorkspace, init_values) -> np.ndarray:
    """Default starting point: a lightly ridged least-squares spline fit of
    each observed component's data; unobserved components start constant at
    their initial value."""
    m, d = ws.m, ws.d
    coeffs = np.tile(np.asarray(init_values, dtype=float), (m, 1))
    e = sp.eye(m, format="csr")
    d2 = e[2:] - 2 * e[1:-1] + e[:-2]
    for col in ws.columns:
        y = col["y"]
        if y.size == 0:
            continue
        phi = col["phi"]
        scale = max(1.0, float(np.var(y)))
        ridge = 1e-6 * scale * (d2.T @ d2) + 1e-10 * scale * e
        A = (phi.T @ phi + ridge).tocsc()
        beta = spla.spsolve(A, phi.T @ y)
        if np.all(np.isfinite(beta)):
            coeffs[:, col["comp"]] = beta
    coeffs[0, :] = init_values
    return coeffs


def _prepare_start(problem: InnerProblem, ws: SmootherWorkspace, warm_start):
    if warm_start is None:
        return cold_start_coefficients(ws, problem.init_values)
    coeffs = np.array(warm_start, dtype=float)
    if coeffs.shape != (ws.m, ws.d):
        raise UsageError(f"warm start must have shape ({ws.m}, {ws.d})")
    coeffs[0, :] = problem.init_values
    return coeffs


def solve_inner(
    problem: InnerProblem,
    warm_start=None,
    workspace: Optional[SmootherWorkspace] = None,
) -> InnerSolution:
    """Solve the penalized smoothing problem for fixed (params, inits, lam).

    The returned coefficients satisfy the initial pins exactly and the
    objective never falls below the starting point's.
    """
    ws = workspace or SmootherWorkspace(problem.system, problem.data, problem.grid)
    lam = float(problem.lam)
    wvec = (
        None
        if problem.component_weights is None
        else np.asarray(problem.component_weights, dtype=float)
    )
    wq_diag = ws.weighted_quad_diag(wvec)

    coeffs = _prepare_start(problem, ws, warm_start)
    free = ws.free
    free_rows = free % ws.m
    free_comps = free // ws.m

    def evaluate(c, want_grad):
        H, gH, hblocks = ws.data_value_grad(c, want_grad)
        J, gJ, jac = ws.penalty_pieces(c, problem.params, want_grad, comp_weights=wvec)
        L = -H + lam * J
        if want_grad:
            gL = (-gH + lam * gJ).ravel(order="F")
            return L, H, J, gL, hblocks, jac
        return L, H, J, None, None, None

    try:
        L, H, J, gL, hblocks, jac = evaluate(coeffs, True)
    except EvaluationError as exc:
        raise DivergenceError(
            "field blow-up at the smoothing start point", last_iterate=coeffs
        ) from exc

    mu = None
    nu = 4.0
    iterations = 0
    converged = False
    eval_failures = 0
    identity_free = sp.identity(free.size, format="csr")

    for iterations in range(1, problem.max_iter + 1):
        gfree = gL[free]
        if np.max(np.abs(gfree)) <= problem.grad_tol * (1.0 + abs(L)):
            converged = True
            iterations -= 1
            break
        hdata = sp.block_diag(
            [b if b is not None else sp.csr_matrix((ws.m, ws.m)) for b in hblocks],
            format="csr",
        )
        K = hdata + (2.0 * lam) * (jac.T @ wq_diag @ jac)
        Kff = K[free][:, free].tocsc()
        diag_scale = max(Kff.diagonal().max(), 1e-30)
        if mu is None:
            mu = 1e-6 * diag_scale
        accepted = False
        for _ in range(60):
            step = spla.spsolve((Kff + mu * identity_free).tocsc(), -gfree)
            if not np.all(np.isfinite(step)):
                mu = max(mu * nu, 1e-12 * diag_scale)
                continue
            trial = coeffs.copy()
            trial[free_rows, free_comps] += step
            try:
                Lt, Ht, Jt, gLt, hbt, jt = evaluate(trial, True)
                eval_failures = 0
            except EvaluationError:
                eval_failures += 1
                if eval_failures > 30:
                    raise DivergenceError(
                        "persistent field blow-up during smoothing",
                        last_iterate=coeffs,
                    )
                mu = max(mu * nu, 1e-12 * diag_scale)
                continue
            if np.isfinite(Lt) and Lt < L:
                coeffs, L, H, J, gL, hblocks, jac = trial, Lt, Ht, Jt, gLt, hbt, jt
                mu = max(mu / 3.0, 1e-12 * diag_scale)
                accepted = True
                break
            mu = mu * nu
            if mu > 1e16 * diag_scale:
                break
        if not accepted:
            break

    splines = [SplineFunction(ws.grid, coeffs[:, k]) for k in range(ws.d)]
    return InnerSolution(
        splines=splines,
        coeffs=coeffs,
        objective=H - lam * J,
        H_value=H,
        J_value=J,
        converged=converged,
        iterations=iterations,
    )


def inner_objective_parts(problem: InnerProblem, coeffs, workspace=None):
    """Pure evaluation of (H, J) at a coefficient matrix."""
    ws = workspace or SmootherWorkspace(problem.system, problem.data, problem.grid)
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (ws.m, ws.d):
        raise UsageError(f"coeffs must have shape ({ws.m}, {ws.d})")
    return ws.objective_parts(coeffs, problem.params)
