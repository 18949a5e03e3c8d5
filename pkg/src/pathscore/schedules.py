"""Deterministic weight schedules for the score estimators.

``beta`` schedules spread the kernel differentiation across steps (terminal
value must be 1); ``alpha`` schedules shift weight from the divergence pullback
to the kernel term each step.  Schedules are deterministic functions of
(step index, time, optionally the current state) -- a forward pass cannot
evaluate anything that looks further into the path's future, so suffix-
dependent processes are rejected at this interface by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import InitialDistribution, SystemModel
from .paths import SimulationPlan, draw_path_noise


class ScheduleError(ValueError):
    """Schedule violates an estimator precondition (e.g. beta_N != 1)."""


@dataclass(frozen=True)
class Schedule:
    """Weight process evaluated at (step n, time t, optional state).

    ``derivative_at`` is the time derivative, required by the continuous-time
    kernel estimator.
    """

    kind: str
    value_at: Callable
    derivative_at: Optional[Callable[[float], float]] = None


def constant_schedule(value: float, allow_negative: bool = False) -> Schedule:
    if value < 0 and not allow_negative:
        raise ScheduleError(f"negative schedule value {value}; pass allow_negative=True to permit")
    v = float(value)
    return Schedule(kind=f"constant({v})", value_at=lambda n, t, x=None: v, derivative_at=lambda t: 0.0)


def beta_linear(total_time: float) -> Schedule:
    """beta_t = t / T with beta' = 1/T; beta_T = 1 exactly and beta_0 = 0
    (dropping the initial-score term)."""
    if total_time <= 0:
        raise ScheduleError("total_time must be positive")
    T = float(total_time)
    return Schedule(kind="linear_in_time", value_at=lambda n, t, x=None: t / T, derivative_at=lambda t: 1.0 / T)


def reciprocal_step_schedule() -> Schedule:
    """alpha_n = 1/n for n >= 1 (0 at n = 0, where it is never consumed).

    Feeding this to the forward divergence-kernel recursion kills the initial
    covector at the first step and reproduces the no-h0 recursion per path.
    """
    return Schedule(
        kind="reciprocal_step",
        value_at=lambda n, t, x=None: 1.0 / n if n >= 1 else 0.0,
        derivative_at=None,
    )


def tabulated_schedule(values) -> Schedule:
    vals = np.asarray(values, dtype=float)
    return Schedule(kind="tabulated", value_at=lambda n, t, x=None: float(vals[n]), derivative_at=None)


def require_terminal_one(beta: Schedule, steps: int, total_time: float) -> None:
    terminal = float(beta.value_at(steps, total_time, None))
    if abs(terminal - 1.0) > 1e-12:
        raise ScheduleError(f"beta must end at 1 (got beta_N = {terminal!r})")


def safe_alpha_estimate(
    model: SystemModel,
    plan: SimulationPlan,
    n_probe_paths: int,
    seed: int,
    init: Optional[InitialDistribution] = None,
    safety: float = 1.5,
) -> float:
    """Heuristic tempering level from the homogeneous covector flow.

    Integrates d nu = (grad sigma grad sigma^T - (dF)^T) nu dt
    - grad sigma <nu, dB> (all source terms zeroed) from every unit covector
    along ``n_probe_paths`` probe paths, estimates (1/T) log of the worst
    growth factor, and returns it scaled by ``safety`` (clamped at 0).  This
    is an empirical probe of the flow's worst-case expansion, not a bound.
    """
    if n_probe_paths < 1:
        raise ValueError("n_probe_paths must be >= 1")
    if init is None:
        init = InitialDistribution(
            sampler=lambda rng: rng.standard_normal(model.dim), name="probe-gaussian"
        )
    dt = plan.dt
    M = model.dim
    x0, noise = draw_path_noise(init, seed, range(n_probe_paths), plan.steps, M, float(np.sqrt(dt)))
    x = x0
    # nu: (paths, basis, dim), one unit covector per basis direction
    nu = np.broadcast_to(np.eye(M), (n_probe_paths, M, M)).copy()
    for n in range(plan.steps):
        b = noise[:, n, :]
        grad = np.asarray(model.diffusion_gradient(x), dtype=float)
        gdotnu = np.sum(grad[:, None, :] * nu, axis=-1)
        drift_t = model.drift_jacobian_transpose_apply(x[:, None, :], nu)
        nudotb = np.sum(nu * b[:, None, :], axis=-1)
        nu = nu + (grad[:, None, :] * gdotnu[..., None] - drift_t) * dt - grad[:, None, :] * nudotb[..., None]
        x = x + model.drift(x) * dt + model.sigma(x, check=(n == 0))[..., None] * b
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"probe path diverged at step {n + 1}")
        if not np.all(np.isfinite(nu)):
            raise RuntimeError(f"probe covector diverged at step {n + 1}")
    growth = np.sqrt(np.sum(nu * nu, axis=-1))
    rate = float(np.log(np.max(growth))) / plan.total_time
    return safety * max(rate, 0.0)
