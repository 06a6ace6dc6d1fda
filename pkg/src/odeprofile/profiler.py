"""Outer estimation loop: profile the data criterion over theta* and
escalate the smoothing weight on a geometric ladder.

Each ladder rung maximizes H(theta*) = data_fit(smoothed splines at
theta*) over theta* (structural parameters plus, optionally, initial
values), warm-starting both theta* and the spline coefficients from the
previous rung.  Once the smoothing weight reaches the threshold, Wald
intervals are computed every rung; the ladder stops when consecutive
intervals overlap by more than 1 - alpha of BOTH interval lengths for
every parameter.

The default outer optimizer is a Nelder-Mead simplex clamped to a box
around the starting point (the profiled objective is an implicit function
of theta*, so derivative-free search is the robust default); an optional
implicit-gradient mode differentiates the inner stationarity condition
(Gaussian criteria only) and drives L-BFGS-B with the exact profile
gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .criteria import Dataset
from .errors import (
    EvaluationError,
    SingularCovarianceError,
    UsageError,
)
from .inference import (
    CovarianceEstimate,
    estimate_covariance,
    spline_sensitivities,
    wald_intervals,
)
from .ode_model import OdeSystem, eval_partials_many
from .smoother import InnerProblem, InnerSolution, SmootherWorkspace, solve_inner
from .spline import KnotGrid

__all__ = [
    "ProfileConfig",
    "LadderRung",
    "ProfileFit",
    "fit_outer",
    "run_ladder",
    "ci_overlap_ratios",
    "nelder_mead",
]


@dataclass(frozen=True)
class ProfileConfig:
    """Settings for the profiling ladder (defaults follow the method's
    recipe: start small, escalate by 10x, compare intervals from the
    moderately large threshold on)."""

    theta_init: np.ndarray
    init_values: np.ndarray
    estimate_init_values: bool = False
    lambda_init: float = 1e-2
    lambda_threshold: float = 1e2
    lambda_factor: float = 10.0
    alpha: float = 0.05
    outer_method: str = "simplex"
    outer_tol: float = 1e-6
    outer_max_iter: int = 500
    max_ladder_steps: int = 12
    search_radius: float = 10.0
    ci_level: float = 0.95
    grad_tol: float = 1e-8
    inner_max_iter: int = 200
    quad_subdiv: int = 4
    simplex_step: float = 0.05

    def __post_init__(self):
        object.__setattr__(
            self, "theta_init", np.asarray(self.theta_init, dtype=float)
        )
        object.__setattr__(
            self, "init_values", np.asarray(self.init_values, dtype=float)
        )
        if not 0.0 < self.alpha < 1.0:
            raise UsageError("alpha must lie in (0, 1)")
        if not self.lambda_factor > 1.0:
            raise UsageError("lambda_factor must exceed 1")
        if not self.lambda_init < self.lambda_threshold:
            raise UsageError("lambda_init must be below lambda_threshold")
        if self.outer_method not in ("simplex", "implicit-gradient"):
            raise UsageError("outer_method must be simplex or implicit-gradient")
        if self.max_ladder_steps < 1:
            raise UsageError("max_ladder_steps must be >= 1")

    def theta_star_init(self) -> np.ndarray:
        if self.estimate_init_values:
            return np.concatenate([self.theta_init, self.init_values])
        return self.theta_init.copy()

    def split(self, system: OdeSystem, theta_star):
        theta_star = np.asarray(theta_star, dtype=float)
        if self.estimate_init_values:
            return (
                theta_star[: system.dim_params],
                theta_star[system.dim_params :],
            )
        return theta_star, self.init_values


@dataclass
class LadderRung:
    lam: float
    theta_star: np.ndarray
    H_value: float
    J_value: float
    intervals: Optional[np.ndarray] = None
    covariance: Optional[CovarianceEstimate] = None
    inner_converged: bool = True
    outer_converged: bool = True
    note: str = ""


@dataclass
class ProfileFit:
    theta_star_hat: np.ndarray
    lambda_final: float
    splines: list
    ladder_trace: list
    covariance: Optional[CovarianceEstimate]
    intervals: Optional[np.ndarray]
    stopped_reason: str
    estimate_init_values: bool = False
    dim_params: int = 0

    def to_dict(self) -> dict:
        return {
            "theta_star_hat": self.theta_star_hat.tolist(),
            "dim_params": self.dim_params,
            "estimate_init_values": self.estimate_init_values,
            "lambda_final": self.lambda_final,
            "stopped_reason": self.stopped_reason,
            "intervals": None if self.intervals is None else self.intervals.tolist(),
            "covariance": None if self.covariance is None else self.covariance.to_dict(),
            "splines": [s.to_dict() for s in self.splines],
            "ladder_trace": [
                {
                    "lambda": r.lam,
                    "theta_star": r.theta_star.tolist(),
                    "H": r.H_value,
                    "J": r.J_value,
                    "intervals": None if r.intervals is None else r.intervals.tolist(),
                    "inner_converged": r.inner_converged,
                    "outer_converged": r.outer_converged,
                    "note": r.note,
                }
                for r in self.ladder_trace
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def trace_csv_lines(self) -> list:
        """Ladder trace rows: lambda,theta...,H,J,ci_lo...,ci_hi... (CI cells
        empty on rungs without intervals)."""
        p = self.theta_star_hat.size
        header = (
            ["lambda"]
            + [f"theta{j + 1}" for j in range(p)]
            + ["H", "J"]
            + [f"ci_lo{j + 1}" for j in range(p)]
            + [f"ci_hi{j + 1}" for j in range(p)]
        )
        lines = [",".join(header)]
        for r in self.ladder_trace:
            cells = [repr(float(r.lam))]
            cells += [repr(float(v)) for v in r.theta_star]
            cells += [repr(float(r.H_value)), repr(float(r.J_value))]
            if r.intervals is None:
                cells += [""] * (2 * p)
            else:
                cells += [repr(float(v)) for v in r.intervals[:, 0]]
                cells += [repr(float(v)) for v in r.intervals[:, 1]]
            lines.append(",".join(cells))
        return lines


def ci_overlap_ratios(interval_a, interval_b):
    """Overlap length of two intervals divided by each interval's length.

    A zero-length interval scores 1 when it intersects the other interval,
    0 otherwise.
    """
    lo_a, hi_a = float(interval_a[0]), float(interval_a[1])
    lo_b, hi_b = float(interval_b[0]), float(interval_b[1])
    if lo_a > hi_a or lo_b > hi_b:
        raise UsageError("interval lower bound exceeds upper bound")
    overlap = min(hi_a, hi_b) - max(lo_a, lo_b)
    intersects = overlap >= 0.0
    overlap = max(0.0, overlap)

    def ratio(lo, hi):
        length = hi - lo
        if length == 0.0:
            return 1.0 if intersects else 0.0
        return overlap / length

    return ratio(lo_a, hi_a), ratio(lo_b, hi_b)


# ---------------------------------------------------------------------------
# Nelder-Mead simplex (minimization, box-clamped, deterministic)
# ---------------------------------------------------------------------------


def nelder_mead(
    fun,
    x0,
    steps,
    tol: float = 1e-6,
    max_iter: int = 500,
    lower=None,
    upper=None,
    n_restarts: int = 1,
):
    """Minimize ``fun`` with the Nelder-Mead simplex.

    ``steps`` sets the initial simplex edge per coordinate; iterates are
    clamped into [lower, upper].  Returns (x_best, f_best, iterations,
    converged).  One deterministic restart with a 10x smaller simplex is
    run after convergence to guard against premature collapse.
    """
    x0 = np.asarray(x0, dtype=float)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), x0.shape).copy()
    ndim = x0.size

    def clamp(x):
        if lower is not None:
            x = np.maximum(x, lower)
        if upper is not None:
            x = np.minimum(x, upper)
        return x

    def build_simplex(center, step):
        pts = [clamp(center.copy())]
        for j in range(ndim):
            v = center.copy()
            v[j] += step[j]
            v = clamp(v)
            if np.allclose(v, pts[0]):
                v = center.copy()
                v[j] -= step[j]
                v = clamp(v)
            pts.append(v)
        return np.asarray(pts)

    total_iters = 0
    best_x, best_f = None, np.inf

    for attempt in range(n_restarts + 1):
        center = x0 if best_x is None else best_x
        simplex = build_simplex(center, steps * (0.1**attempt))
        fvals = np.array([fun(x) for x in simplex])
        converged = False
        while total_iters < max_iter:
            order = np.argsort(fvals, kind="stable")
            simplex = simplex[order]
            fvals = fvals[order]
            fbest, fworst = fvals[0], fvals[-1]
            fspread = fworst - fbest
            xspread = np.max(np.abs(simplex - simplex[0]))
            if (
                np.isfinite(fbest)
                and fspread <= tol * (1.0 + abs(fbest))
                and xspread <= tol * (1.0 + np.max(np.abs(simplex[0])))
            ):
                converged = True
                break
            total_iters += 1
            centroid = simplex[:-1].mean(axis=0)
            xr = clamp(centroid + (centroid - simplex[-1]))
            fr = fun(xr)
            if fr < fvals[0]:
                xe = clamp(centroid + 2.0 * (centroid - simplex[-1]))
                fe = fun(xe)
                if fe < fr:
                    simplex[-1], fvals[-1] = xe, fe
                else:
                    simplex[-1], fvals[-1] = xr, fr
            elif fr < fvals[-2]:
                simplex[-1], fvals[-1] = xr, fr
            else:
                xc = clamp(centroid + 0.5 * (simplex[-1] - centroid))
                fc = fun(xc)
                if fc < fvals[-1]:
                    simplex[-1], fvals[-1] = xc, fc
                else:
                    for i in range(1, len(simplex)):
                        simplex[i] = clamp(simplex[0] + 0.5 * (simplex[i] - simplex[0]))
                        fvals[i] = fun(simplex[i])
        i0 = int(np.argmin(fvals))
        if fvals[i0] < best_f:
            best_x, best_f = simplex[i0].copy(), float(fvals[i0])
        if total_iters >= max_iter:
            break
    return best_x, best_f, total_iters, converged


# ---------------------------------------------------------------------------
# Profiled objective machinery
# ---------------------------------------------------------------------------


class _ProfileObjective:
    """theta* -> profiled H, with a coefficient warm-start chain and a cache
    of the best visited point."""

    def __init__(self, system, data, grid, lam, config, workspace, warm_coeffs):
        self.system = system
        self.data = data
        self.grid = grid
        self.lam = lam
        self.config = config
        self.ws = workspace
        self.chain = warm_coeffs
        self.best = None  # (H, theta_star, InnerSolution)

    def solve(self, theta_star, warm=True):
        params, inits = self.config.split(self.system, theta_star)
        problem = InnerProblem(
            system=self.system,
            data=self.data,
            grid=self.grid,
            params=params,
            init_values=inits,
            lam=self.lam,
            grad_tol=self.config.grad_tol,
            max_iter=self.config.inner_max_iter,
        )
        return solve_inner(
            problem, warm_start=self.chain if warm else None, workspace=self.ws
        )

    def profiled_H(self, theta_star) -> float:
        try:
            sol = self.solve(theta_star)
        except (EvaluationError, FloatingPointError):
            return -np.inf
        self.chain = sol.coeffs
        if self.best is None or sol.H_value > self.best[0]:
            self.best = (sol.H_value, np.array(theta_star, dtype=float), sol)
        return sol.H_value

    def negated(self, theta_star) -> float:
        return -self.profiled_H(theta_star)


def _box(config: ProfileConfig, theta_star_init):
    r = config.search_radius
    return theta_star_init - r, theta_star_init + r


def fit_outer(
    system: OdeSystem,
    data: Dataset,
    grid: KnotGrid,
    lam: float,
    theta_star_init,
    config: ProfileConfig,
    workspace: Optional[SmootherWorkspace] = None,
    warm_coeffs=None,
    box=None,
):
    """Maximize the profiled data criterion over theta* at fixed lam.

    Returns (theta_star_hat, InnerSolution at theta_star_hat, outer_converged).
    Inner-solve divergence at a probe scores that probe -inf and the search
    continues; the returned solution is re-solved at the winner so its
    coefficients and diagnostics are self-consistent.
    """
    theta_star_init = np.asarray(theta_star_init, dtype=float)
    ws = workspace or SmootherWorkspace(
        system, data, grid, subdiv=config.quad_subdiv
    )
    obj = _ProfileObjective(system, data, grid, lam, config, ws, warm_coeffs)
    lower, upper = box if box is not None else _box(config, theta_star_init)

    if config.outer_method == "implicit-gradient":
        theta_hat, converged = _fit_outer_gradient(
            obj, theta_star_init, lower, upper
        )
    else:
        steps = config.simplex_step * np.maximum(1.0, np.abs(theta_star_init))
        theta_hat, _, _, converged = nelder_mead(
            obj.negated,
            theta_star_init,
            steps,
            tol=config.outer_tol,
            max_iter=config.outer_max_iter,
            lower=lower,
            upper=upper,
        )

    if obj.best is not None and obj.best[0] > -np.inf:
        # prefer the best visited point; re-solve there for a consistent record
        theta_hat = obj.best[1]
    solution = obj.solve(theta_hat)
    return theta_hat, solution, converged


# -- implicit-gradient mode (Gaussian criteria) -----------------------------


def _require_gaussian(data: Dataset):
    if any(c.name != "gaussian" for c in data.criteria):
        raise UsageError(
            "implicit-gradient outer mode supports Gaussian criteria only"
        )


def _field_second_partials(system, states, ts, params):
    """d(state-jacobian)/d(state) by central differences: (n, d, d, d)."""
    n, d = states.shape
    out = np.empty((n, d, d, d))
    for l in range(d):
        h = np.maximum(1e-6, 1e-6 * np.abs(states[:, l]))
        sp_ = states.copy()
        sm_ = states.copy()
        sp_[:, l] += h
        sm_[:, l] -= h
        jp, _ = eval_partials_many(system, sp_, ts, params)
        jm, _ = eval_partials_many(system, sm_, ts, params)
        out[:, :, :, l] = (jp - jm) / (2 * h)[:, None, None]
    return out


def _profile_value_grad(obj: _ProfileObjective, theta_star):
    """Profiled H and its exact gradient via the implicit function theorem.

    At the inner optimum, grad_free L = 0 with L = -H + lam*J; then
    d c_free / d theta = -L_ff^-1 (L_f,theta + L_f,pin dpin/dtheta) and
    dH/dtheta follows by the chain rule.  The coefficient Hessian of L is
    assembled exactly (Gauss-Newton block plus the residual curvature term
    through the field's second state derivatives); the mixed block
    L_f,theta is formed by central differences of the analytic coefficient
    gradient of J over theta.
    """
    ws = obj.ws
    sol = obj.solve(theta_star)
    obj.chain = sol.coeffs
    if obj.best is None or sol.H_value > obj.best[0]:
        obj.best = (sol.H_value, np.array(theta_star, dtype=float), sol)
    lam = obj.lam
    params, inits = obj.config.split(obj.system, theta_star)
    coeffs = sol.coeffs
    m, d = coeffs.shape
    p = np.asarray(theta_star).size

    H, gH, hblocks = ws.data_value_grad(coeffs, want_grad=True)
    J, gJ, jac = ws.penalty_pieces(coeffs, params, want_grad=True)

    quad = ws.quad
    states = quad.basis @ coeffs
    resid = (quad.dbasis @ coeffs) - np.asarray(
        _field_values(obj.system, states, quad.nodes, params)
    )
    fxx = _field_second_partials(obj.system, states, quad.nodes, params)
    hdata = sp.block_diag(
        [b if b is not None else sp.csr_matrix((m, m)) for b in hblocks],
        format="csr",
    )
    K = hdata + (2.0 * lam) * (jac.T @ ws.weighted_quad_diag(None) @ jac)
    # residual curvature: -2 lam sum_c w_q rho_qc * d2field_c/dx_k dx_l
    blocks = []
    for k in range(d):
        row = []
        for l in range(d):
            s = -2.0 * lam * np.einsum(
                "q,qc->q", quad.weights, resid * fxx[:, :, k, l]
            )
            row.append((quad.basis.T @ sp.diags(s) @ quad.basis).tocsr())
        blocks.append(row)
    K = (K + sp.bmat(blocks, format="csr")).tocsc()

    free = ws.free
    Kff = K[free][:, free].tocsc()
    gradH_flat = gH.ravel(order="F")
    u = spla.spsolve(Kff, gradH_flat[free])

    dP = np.zeros(p)
    for a in range(p):
        h = 1e-5 * max(1.0, abs(theta_star[a]))
        tp = np.array(theta_star, dtype=float)
        tm = np.array(theta_star, dtype=float)
        tp[a] += h
        tm[a] -= h
        if a < obj.system.dim_params or not obj.config.estimate_init_values:
            pp, _ = obj.config.split(obj.system, tp)
            pm, _ = obj.config.split(obj.system, tm)
            _, gJp, _ = ws.penalty_pieces(coeffs, pp, want_grad=True)
            _, gJm, _ = ws.penalty_pieces(coeffs, pm, want_grad=True)
            Lft = lam * (gJp - gJm).ravel(order="F") / (2 * h)
            dP[a] = -u @ Lft[free]
        else:
            pin = (a - obj.system.dim_params) * m
            col = np.asarray(K[:, pin].todense()).ravel()
            dP[a] = -u @ col[free] + gradH_flat[pin]
    return sol.H_value, dP, sol


def _field_values(system, states, ts, params):
    from .ode_model import eval_field_many

    return eval_field_many(system, states, ts, params)


def _fit_outer_gradient(obj: _ProfileObjective, theta_star_init, lower, upper):
    from scipy.optimize import minimize

    _require_gaussian(obj.data)

    def fun(theta_star):
        try:
            H, dP, _ = _profile_value_grad(obj, theta_star)
        except (EvaluationError, FloatingPointError):
            return 1e12, np.zeros_like(theta_star)
        return -H, -dP

    res = minimize(
        fun,
        np.asarray(theta_star_init, dtype=float),
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lower, upper)),
        options={
            "maxiter": obj.config.outer_max_iter,
            "ftol": 1e-14,
            "gtol": obj.config.outer_tol,
        },
    )
    return np.asarray(res.x, dtype=float), bool(res.success)


# ---------------------------------------------------------------------------
# The smoothing-weight ladder
# ---------------------------------------------------------------------------


def run_ladder(
    system: OdeSystem,
    data: Dataset,
    grid: KnotGrid,
    config: ProfileConfig,
) -> ProfileFit:
    """Escalate the smoothing weight geometrically, re-profiling theta* at
    every rung with warm starts, and stop when consecutive Wald intervals
    overlap by more than 1 - alpha of both lengths for every parameter."""
    ws = SmootherWorkspace(system, data, grid, subdiv=config.quad_subdiv)
    theta_star = config.theta_star_init()
    box = _box(config, theta_star)
    lam = float(config.lambda_init)
    warm_coeffs = None
    trace = []
    prev_intervals = None
    stopped_reason = "ladder-exhausted"
    final = None

    for _ in range(config.max_ladder_steps):
        theta_star, solution, outer_ok = fit_outer(
            system,
            data,
            grid,
            lam,
            theta_star,
            config,
            workspace=ws,
            warm_coeffs=warm_coeffs,
            box=box,
        )
        warm_coeffs = solution.coeffs
        rung = LadderRung(
            lam=lam,
            theta_star=theta_star.copy(),
            H_value=solution.H_value,
            J_value=solution.J_value,
            inner_converged=solution.converged,
            outer_converged=outer_ok,
        )
        covariance = None
        if lam >= config.lambda_threshold * (1 - 1e-12):
            try:
                sens = spline_sensitivities(
                    system,
                    data,
                    grid,
                    theta_star,
                    lam,
                    init_values=config.init_values,
                    estimate_init_values=config.estimate_init_values,
                    workspace=ws,
                    center=solution,
                    grad_tol=config.grad_tol,
                    max_iter=config.inner_max_iter,
                )
                covariance = estimate_covariance(
                    data, None, sens.value, sens.dtheta, sens.d2theta
                )
                rung.intervals, _ = wald_intervals(
                    theta_star, covariance, config.ci_level
                )
                rung.covariance = covariance
            except (SingularCovarianceError, EvaluationError) as exc:
                rung.note = f"interval computation failed: {exc}"
        trace.append(rung)
        final = (theta_star, solution, rung)

        if rung.intervals is not None and prev_intervals is not None:
            ratios = [
                ci_overlap_ratios(prev_intervals[j], rung.intervals[j])
                for j in range(rung.intervals.shape[0])
            ]
            if all(
                ra > 1 - config.alpha and rb > 1 - config.alpha for ra, rb in ratios
            ):
                stopped_reason = "overlap"
                break
        if rung.intervals is not None:
            prev_intervals = rung.intervals
        lam *= config.lambda_factor

    theta_star, solution, rung = final
    return ProfileFit(
        theta_star_hat=theta_star,
        lambda_final=rung.lam,
        splines=solution.splines,
        ladder_trace=trace,
        covariance=rung.covariance,
        intervals=rung.intervals,
        stopped_reason=stopped_reason,
        estimate_init_values=config.estimate_init_values,
        dim_params=system.dim_params,
    )
