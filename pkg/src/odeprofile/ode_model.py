"""Parameterized ODE systems: vector fields, partial derivatives, builtins.

A system is a plain value: a right-hand-side evaluator plus optional
analytic partial derivatives. When partials are absent they are replaced
by central finite differences with a relative step (absolute floor 1e-6),
which is second-order accurate for the C^3 fields the estimator assumes.

Evaluator conventions
---------------------
``field(state, t, params) -> dstate``

* single point: ``state`` has shape ``(dim_state,)``, ``t`` is a scalar,
  the result has shape ``(dim_state,)``;
* batch (only when ``vectorized=True``): ``state`` has shape
  ``(n, dim_state)``, ``t`` has shape ``(n,)``, result ``(n, dim_state)``.

``partial_state`` returns the state Jacobian ``(dim_state, dim_state)``
(batched: ``(n, dim_state, dim_state)``), ``partial_params`` the parameter
Jacobian ``(dim_state, dim_params)`` (batched analogously).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import EvaluationError, NotFoundError, UsageError

__all__ = [
    "OdeSystem",
    "eval_field",
    "eval_field_many",
    "eval_partials",
    "eval_partials_many",
    "builtin_systems",
    "get_system",
]


@dataclass(frozen=True)
class OdeSystem:
    """A first-order ODE system dx/dt = field(x, t, theta) on [0, time_horizon]."""

    name: str
    dim_state: int
    dim_params: int
    time_horizon: float
    field: Callable
    partial_state: Optional[Callable] = None
    partial_params: Optional[Callable] = None
    vectorized: bool = False

    def __post_init__(self):
        if self.dim_state < 1:
            raise UsageError("dim_state must be a positive integer")
        if self.dim_params < 0:
            raise UsageError("dim_params must be nonnegative")
        if not self.time_horizon > 0:
            raise UsageError("time_horizon must be positive")

    def with_horizon(self, time_horizon: float) -> "OdeSystem":
        return replace(self, time_horizon=float(time_horizon))


def _check_point(system: OdeSystem, state, t, params):
    state = np.asarray(state, dtype=float)
    params = np.asarray(params, dtype=float)
    if state.shape != (system.dim_state,):
        raise UsageError(
            f"state has shape {state.shape}, expected ({system.dim_state},) "
            f"for system '{system.name}'"
        )
    if params.shape != (system.dim_params,):
        raise UsageError(
            f"params has shape {params.shape}, expected ({system.dim_params},) "
            f"for system '{system.name}'"
        )
    t = float(t)
    if not (-1e-12 <= t <= system.time_horizon * (1 + 1e-12) + 1e-12):
        raise UsageError(
            f"t={t} outside [0, {system.time_horizon}] for system '{system.name}'"
        )
    return state, t, params


def eval_field(system: OdeSystem, state, t, params) -> np.ndarray:
    """Evaluate the right-hand side at a single (state, t, params) point.

    Raises EvaluationError carrying (t, state) if the output is non-finite.
    """
    state, t, params = _check_point(system, state, t, params)
    out = np.asarray(system.field(state, t, params), dtype=float).reshape(-1)
    if out.shape != (system.dim_state,):
        raise UsageError(
            f"field of '{system.name}' returned shape {out.shape}, "
            f"expected ({system.dim_state},)"
        )
    if not np.all(np.isfinite(out)):
        raise EvaluationError(
            f"field of '{system.name}' produced a non-finite value",
            t=t,
            state=state.tolist(),
        )
    return out


def eval_field_many(system: OdeSystem, states, ts, params) -> np.ndarray:
    """Batch field evaluation; states (n, d), ts (n,).  Does not raise on
    non-finite values (callers inspect the result), but validates shapes."""
    states = np.asarray(states, dtype=float)
    ts = np.asarray(ts, dtype=float)
    params = np.asarray(params, dtype=float)
    if states.ndim != 2 or states.shape[1] != system.dim_state:
        raise UsageError(f"states must be (n, {system.dim_state})")
    if system.vectorized:
        with np.errstate(all="ignore"):
            out = np.asarray(system.field(states, ts, params), dtype=float)
        return out.reshape(states.shape)
    out = np.empty_like(states)
    with np.errstate(all="ignore"):
        for i in range(states.shape[0]):
            out[i] = np.asarray(system.field(states[i], ts[i], params), dtype=float)
    return out


def _fd_jacobian(fun, x0, base_shape):
    """Central finite differences of ``fun`` over the vector x0."""
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for j in range(x0.size):
        h = max(1e-6, 1e-6 * abs(x0[j]))
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((fun(xp) - fun(xm)) / (2 * h))
    if not cols:
        return np.zeros(base_shape + (0,))
    return np.stack(cols, axis=-1)


def eval_partials(system: OdeSystem, state, t, params):
    """State and parameter Jacobians at a point.

    Analytic partials are used when the system provides them; otherwise
    central finite differences with step max(1e-6, 1e-6*|value|).
    """
    state, t, params = _check_point(system, state, t, params)
    if system.partial_state is not None:
        jac_x = np.asarray(system.partial_state(state, t, params), dtype=float)
        jac_x = jac_x.reshape(system.dim_state, system.dim_state)
    else:
        jac_x = _fd_jacobian(
            lambda s: eval_field(system, s, t, params), state, (system.dim_state,)
        )
    if system.partial_params is not None:
        jac_p = np.asarray(system.partial_params(state, t, params), dtype=float)
        jac_p = jac_p.reshape(system.dim_state, system.dim_params)
    else:
        jac_p = _fd_jacobian(
            lambda p: eval_field(system, state, t, p), params, (system.dim_state,)
        )
    for name, jac in (("state", jac_x), ("param", jac_p)):
        if not np.all(np.isfinite(jac)):
            raise EvaluationError(
                f"{name} jacobian of '{system.name}' produced a non-finite value",
                t=t,
                state=state.tolist(),
            )
    return jac_x, jac_p


def eval_partials_many(system: OdeSystem, states, ts, params):
    """Batch Jacobians: returns (n, d, d) and (n, d, p) arrays."""
    states = np.asarray(states, dtype=float)
    ts = np.asarray(ts, dtype=float)
    params = np.asarray(params, dtype=float)
    n, d = states.shape
    p = system.dim_params
    if system.vectorized and system.partial_state is not None:
        with np.errstate(all="ignore"):
            jx = np.asarray(system.partial_state(states, ts, params), dtype=float)
            jx = jx.reshape(n, d, d)
            if system.partial_params is not None:
                jp = np.asarray(system.partial_params(states, ts, params), dtype=float)
                jp = jp.reshape(n, d, p)
            else:
                jp = _fd_params_many(system, states, ts, params)
        return jx, jp
    if system.partial_state is not None or system.partial_params is not None:
        jx = np.empty((n, d, d))
        jp = np.empty((n, d, p))
        for i in range(n):
            jx[i], jp[i] = eval_partials(system, states[i], ts[i], params)
        return jx, jp
    return _fd_state_many(system, states, ts, params), _fd_params_many(
        system, states, ts, params
    )


def _fd_state_many(system, states, ts, params):
    n, d = states.shape
    jx = np.empty((n, d, d))
    for j in range(d):
        h = np.maximum(1e-6, 1e-6 * np.abs(states[:, j]))
        sp = states.copy()
        sm = states.copy()
        sp[:, j] += h
        sm[:, j] -= h
        fp = eval_field_many(system, sp, ts, params)
        fm = eval_field_many(system, sm, ts, params)
        jx[:, :, j] = (fp - fm) / (2 * h)[:, None]
    return jx


def _fd_params_many(system, states, ts, params):
    n, d = states.shape
    p = system.dim_params
    jp = np.empty((n, d, p))
    for j in range(p):
        h = max(1e-6, 1e-6 * abs(params[j]))
        pp = params.copy()
        pm = params.copy()
        pp[j] += h
        pm[j] -= h
        fp = eval_field_many(system, states, ts, pp)
        fm = eval_field_many(system, states, ts, pm)
        jp[:, :, j] = (fp - fm) / (2 * h)
    return jp


# ---------------------------------------------------------------------------
# Builtin systems
# ---------------------------------------------------------------------------


def _fhn_field(state, t, params):
    a, b, c = params
    v = state[..., 0]
    r = state[..., 1]
    dv = c * (v - v**3 / 3.0 + r)
    dr = -(v - a + b * r) / c
    return np.stack([dv, dr], axis=-1)


def _fhn_jac_state(state, t, params):
    a, b, c = params
    v = state[..., 0]
    one = np.ones_like(v)
    row0 = np.stack([c * (1.0 - v**2), c * one], axis=-1)
    row1 = np.stack([-one / c, -(b / c) * one], axis=-1)
    return np.stack([row0, row1], axis=-2)


def _fhn_jac_params(state, t, params):
    a, b, c = params
    v = state[..., 0]
    r = state[..., 1]
    zero = np.zeros_like(v)
    row0 = np.stack([zero, zero, v - v**3 / 3.0 + r], axis=-1)
    row1 = np.stack([np.ones_like(v) / c, -r / c, (v - a + b * r) / c**2], axis=-1)
    return np.stack([row0, row1], axis=-2)


def _exp_growth_field(state, t, params):
    return np.asarray(state, dtype=float).copy()


def _exp_growth_jac_state(state, t, params):
    y = state[..., 0]
    return np.ones_like(y)[..., None, None]


def _exp_growth_jac_params(state, t, params):
    y = state[..., 0]
    return np.zeros(y.shape + (1, 0))


def _tan_blowup_field(state, t, params):
    (theta,) = params
    x = state[..., 0]
    return (1.0 + theta * x**2)[..., None]


def _tan_blowup_jac_state(state, t, params):
    (theta,) = params
    x = state[..., 0]
    return (2.0 * theta * x)[..., None, None]


def _tan_blowup_jac_params(state, t, params):
    x = state[..., 0]
    return (x**2)[..., None, None]


def _decay_forced_field(state, t, params):
    x = state[..., 0]
    return (-x + np.sin(t))[..., None]


def _decay_forced_jac_state(state, t, params):
    x = state[..., 0]
    return -np.ones_like(x)[..., None, None]


def _decay_forced_jac_params(state, t, params):
    x = state[..., 0]
    return np.zeros(x.shape + (1, 0))


def builtin_systems() -> dict:
    """Catalog of the named systems shipped with the package.

    * ``fitzhugh_nagumo`` -- 2-state neural spike model, params (a, b, c);
    * ``exp_growth``      -- dy/dt = y, no parameters;
    * ``tan_blowup``      -- dx/dt = 1 + theta*x^2, solution tan(sqrt(theta) t)
      exists only up to pi/(2 sqrt(theta));
    * ``decay_forced``    -- dx/dt = -x + sin t, strictly negative state
      derivative coefficient (used by the scalar deviation-bound calculator).
    """
    return {
        "fitzhugh_nagumo": OdeSystem(
            name="fitzhugh_nagumo",
            dim_state=2,
            dim_params=3,
            time_horizon=20.0,
            field=_fhn_field,
            partial_state=_fhn_jac_state,
            partial_params=_fhn_jac_params,
            vectorized=True,
        ),
        "exp_growth": OdeSystem(
            name="exp_growth",
            dim_state=1,
            dim_params=0,
            time_horizon=20.0,
            field=_exp_growth_field,
            partial_state=_exp_growth_jac_state,
            partial_params=_exp_growth_jac_params,
            vectorized=True,
        ),
        "tan_blowup": OdeSystem(
            name="tan_blowup",
            dim_state=1,
            dim_params=1,
            time_horizon=2.0,
            field=_tan_blowup_field,
            partial_state=_tan_blowup_jac_state,
            partial_params=_tan_blowup_jac_params,
            vectorized=True,
        ),
        "decay_forced": OdeSystem(
            name="decay_forced",
            dim_state=1,
            dim_params=0,
            time_horizon=20.0,
            field=_decay_forced_field,
            partial_state=_decay_forced_jac_state,
            partial_params=_decay_forced_jac_params,
            vectorized=True,
        ),
    }


def get_system(name: str, time_horizon: Optional[float] = None) -> OdeSystem:
    """Look up a builtin system by name, optionally overriding the horizon."""
    catalog = builtin_systems()
    if name not in catalog:
        raise NotFoundError(
            f"unknown system '{name}'; available: {', '.join(sorted(catalog))}"
        )
    system = catalog[name]
    if time_horizon is not None:
        system = system.with_horizon(time_horizon)
    return system
