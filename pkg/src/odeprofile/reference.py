"""Desk-scale oracles: RK4 integration, variational sensitivities, and the
seeded data simulator.

These exist to verify the spline-based estimator; the estimator itself
never solves an ODE.  The simulator's randomness comes from a counter-based
64-bit generator (SplitMix64) feeding Box-Muller, so a seed pins every
draw independently of any library RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .criteria import Dataset
from .errors import BlowUpError, UsageError
from .ode_model import OdeSystem, eval_field, eval_partials

__all__ = [
    "Trajectory",
    "rk4_solve",
    "solve_sensitivities",
    "simulate_dataset",
    "normal_draws",
    "constant_residual_growth_table",
]

_STATE_CAP = 1e8


@dataclass(frozen=True)
class Trajectory:
    """Dense solution values on a uniform grid with a cubic interpolant."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or np.any(np.diff(times) <= 0) or times[0] != 0.0:
            raise UsageError("times must increase strictly from 0")
        if values.shape[0] != times.size:
            raise UsageError("one value row per time")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_interp", CubicSpline(times, values, axis=0))

    def __call__(self, ts) -> np.ndarray:
        return self._interp(ts)

    def component(self, index: int):
        """Evaluator t -> values[:, index] for one state component."""
        return lambda ts: self._interp(ts)[..., index]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def save_csv(self, path):
        """CSV format t,x1,...,xd (repr-formatted, LF endings)."""
        header = "t," + ",".join(f"x{j + 1}" for j in range(self.dim))
        lines = [header]
        for i, t in enumerate(self.times):
            lines.append(
                repr(float(t)) + "," + ",".join(repr(float(v)) for v in self.values[i])
            )
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load_csv(cls, path) -> "Trajectory":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip() != ""]
        header = lines[0].split(",")
        if header[0] != "t" or any(h != f"x{j + 1}" for j, h in enumerate(header[1:])):
            raise UsageError(f"{path}: malformed trajectory header {lines[0]!r}")
        rows = [[float(c) for c in ln.split(",")] for ln in lines[1:]]
        arr = np.asarray(rows, dtype=float)
        return cls(times=arr[:, 0], values=arr[:, 1:])


def _steps_for(system: OdeSystem, step: Optional[float]):
    T = system.time_horizon
    if step is None:
        n = 4000
    else:
        if step <= 0:
            raise UsageError("step must be positive")
        n = max(1, int(round(T / step)))
    return n, T / n


def _rk4_path(rhs, init, n, h, dim):
    """Generic fixed-step RK4 on a flattened state; raises BlowUpError when
    the state leaves the finite range."""
    ys = np.empty((n + 1, dim))
    y = np.asarray(init, dtype=float).copy()
    ys[0] = y
    t = 0.0
    with np.errstate(all="ignore"):
        for i in range(n):
            k1 = rhs(y, t)
            k2 = rhs(y + 0.5 * h * k1, t + 0.5 * h)
            k3 = rhs(y + 0.5 * h * k2, t + 0.5 * h)
            k4 = rhs(y + h * k3, t + h)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t = (i + 1) * h
            if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > _STATE_CAP:
                raise BlowUpError(
                    f"state left the finite range at t={t:.6g} "
                    f"(last finite time {i * h:.6g})",
                    last_time=i * h,
                    last_state=ys[i].copy(),
                )
            ys[i + 1] = y
    return ys


def rk4_solve(system: OdeSystem, params, init, step: Optional[float] = None) -> Trajectory:
    """Classical fourth-order Runge-Kutta on a uniform grid (default
    time_horizon/4000 steps).

    Raises BlowUpError carrying the last finite time if the solution
    escapes; for dx/dt = 1 + theta*x^2 with theta >= (pi/(2T))^2 that time
    is close to pi/(2*sqrt(theta)).
    """
    params = np.asarray(params, dtype=float)
    init = np.asarray(init, dtype=float)
    if init.shape != (system.dim_state,):
        raise UsageError(f"init must have shape ({system.dim_state},)")
    eval_field(system, init, 0.0, params)  # validate dimensions up front
    n, h = _steps_for(system, step)

    def rhs(y, t):
        return np.asarray(system.field(y, t, params), dtype=float)

    ys = _rk4_path(rhs, init, n, h, system.dim_state)
    return Trajectory(times=np.linspace(0.0, system.time_horizon, n + 1), values=ys)


def solve_sensitivities(
    system: OdeSystem,
    params,
    init,
    step: Optional[float] = None,
    include_init_values: bool = False,
):
    """Trajectories of d(state)/d(theta*) from the variational equations.

    Integrates dS/dt = F_x S + F_theta alongside the state with S(0) = 0
    for parameters; when ``include_init_values`` the initial-value columns
    are appended with S(0) = identity.  Returns (state_trajectory,
    [one Trajectory per theta* coordinate]).
    """
    params = np.asarray(params, dtype=float)
    init = np.asarray(init, dtype=float)
    d = system.dim_state
    p = system.dim_params + (d if include_init_values else 0)
    n, h = _steps_for(system, step)

    S0 = np.zeros((d, p))
    if include_init_values:
        S0[:, system.dim_params :] = np.eye(d)

    def rhs(flat, t):
        y = flat[:d]
        S = flat[d:].reshape(d, p)
        f = np.asarray(system.field(y, t, params), dtype=float)
        jx, jp = eval_partials(system, y, min(t, system.time_horizon), params)
        dS = jx @ S
        if system.dim_params:
            dS[:, : system.dim_params] += jp
        return np.concatenate([f, dS.ravel()])

    flat0 = np.concatenate([init, S0.ravel()])
    ys = _rk4_path(rhs, flat0, n, h, d * (1 + p))
    times = np.linspace(0.0, system.time_horizon, n + 1)
    state = Trajectory(times=times, values=ys[:, :d])
    sens = [
        Trajectory(times=times, values=ys[:, d:].reshape(n + 1, d, p)[:, :, j])
        for j in range(p)
    ]
    return state, sens


# ---------------------------------------------------------------------------
# Counter-based RNG (SplitMix64 + Box-Muller)
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    """SplitMix64 output for draw indices ``counters`` under ``seed``."""
    with np.errstate(over="ignore"):
        z = (np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (counters + np.uint64(1)) * _GOLDEN).astype(
            np.uint64
        )
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


def normal_draws(seed: int, count: int, start_index: int = 0) -> np.ndarray:
    """Deterministic standard normals: draw k consumes the SplitMix64
    uniforms with counters (2*floor(k/2), 2*floor(k/2)+1) through
    Box-Muller (cosine branch for even k, sine branch for odd k)."""
    if count < 0:
        raise UsageError("count must be nonnegative")
    if count == 0:
        return np.empty(0)
    pair0 = start_index // 2
    pair_end = (start_index + count + 1) // 2
    counters = np.arange(pair0, pair_end, dtype=np.uint64)
    u1 = (_splitmix64(seed, counters * np.uint64(2)) >> np.uint64(11)).astype(
        np.float64
    ) * (2.0**-53)
    u2 = (
        _splitmix64(seed, counters * np.uint64(2) + np.uint64(1)) >> np.uint64(11)
    ).astype(np.float64) * (2.0**-53)
    r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0, 1] avoids log(0)
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * (pair_end - pair0))
    out[0::2] = r * np.cos(angle)
    out[1::2] = r * np.sin(angle)
    lo = start_index - 2 * pair0
    return out[lo : lo + count]


def simulate_dataset(
    system: OdeSystem,
    params,
    init,
    times,
    noise_sd,
    seed: int,
    observed_components: Optional[Sequence[int]] = None,
    criteria=None,
    step: Optional[float] = None,
):
    """Observations Y_i = state(T_i) + eps_i with independent Gaussian noise.

    ``noise_sd`` is a standard deviation (scalar or per observed component).
    Deterministic given the seed.  Returns (Dataset, truth Trajectory).
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(times > system.time_horizon * (1 + 1e-12)):
        raise UsageError("sample times must lie within [0, time_horizon]")
    comps = (
        tuple(range(system.dim_state))
        if observed_components is None
        else tuple(int(c) for c in observed_components)
    )
    if any(c < 0 or c >= system.dim_state for c in comps):
        raise UsageError("observed component index out of range")
    sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (len(comps),)).copy()
    if np.any(sd < 0):
        raise UsageError("noise_sd must be nonnegative")
    truth = rk4_solve(system, params, init, step=step)
    clean = truth(times)[:, list(comps)]
    eps = normal_draws(seed, clean.size).reshape(clean.shape) * sd[None, :]
    data = Dataset(
        times=times,
        observations=clean + eps,
        observed_components=comps,
        criteria=criteria or (),
    )
    return data, truth


def constant_residual_growth_table(epsilon: float, T: float, n_points: int = 41):
    """How a constant ODE residual on dy/dt = y inflates with time.

    The perturbed trajectory yhat(t) = y0*e^t + eps*(e^t - 1) satisfies
    dyhat/dt - yhat = eps exactly; the table columns are
    (t, |yhat - y|, |eps|*(e^t - 1)) and the last two agree up to float
    rounding.  With T large the deviation is exponentially larger than eps.
    """
    ts = np.linspace(0.0, T, n_points)
    y0 = 1.0
    et = np.exp(ts)
    y = y0 * et
    yhat = y0 * et + epsilon * (et - 1.0)
    return np.column_stack([ts, np.abs(yhat - y), abs(epsilon) * (et - 1.0)])
