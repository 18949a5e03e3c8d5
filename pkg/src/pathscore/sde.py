"""Time-discretized continuous-limit score estimators.

These steppers integrate the covector companion equation on the same time grid
and with the same Brownian increments as the state path (the formulas are
derived from exactly that coupled discretization; the covector never sees
independent noise).  The geometry terms use the leading-order expansions

    div g_*    ~  grad div F dt + (hess sigma) dB - (hess sigma grad sigma) dt
    g^{*-1}    ~  I - (dF)^T dt - grad sigma dB^T + grad sigma grad sigma^T dt

whose error vanishes with dt (tested as a convergence-order study).  Rank-one
applications such as (grad sigma dB^T) nu are computed as inner products times
vectors, never as formed matrices, keeping each step O(dim) per path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .discrete import EXPLOSION_CAP, CovectorExplosionError
from .model import SystemModel
from .schedules import Schedule, ScheduleError, require_terminal_one

Array = np.ndarray


@dataclass
class CovectorState:
    """Running covector of the recursive formulas, with its step index."""

    nu: Array
    step_index: int


@dataclass
class SdeStepTerms:
    """Leading-order geometry terms of one Euler step, bundled for reuse."""

    approx_div_jacobian: Array
    approx_pullback_inverse_apply: object


def sde_step_terms(model: SystemModel, x: Array, dB: Array, dt: float) -> SdeStepTerms:
    """Evaluate the approximated div g_* covector and the pullback-inverse map.

    The returned apply(nu) computes
    (I - (dF)^T dt - grad sigma dB^T + grad sigma grad sigma^T dt) nu.
    """
    x = np.asarray(x, dtype=float)
    dB = np.asarray(dB, dtype=float)
    grad = np.asarray(model.diffusion_gradient(x), dtype=float)
    hess_db = np.asarray(model.diffusion_hessian_apply(x, dB), dtype=float)
    hess_grad = np.asarray(model.diffusion_hessian_apply(x, grad), dtype=float)
    ddiv = np.asarray(model.drift_divergence_gradient(x), dtype=float)
    approx_div = ddiv * dt + hess_db - hess_grad * dt

    def apply(nu: Array) -> Array:
        nu = np.asarray(nu, dtype=float)
        jt = np.asarray(model.drift_jacobian_transpose_apply(x, nu), dtype=float)
        bdotnu = np.sum(dB * nu, axis=-1)
        gdotnu = np.sum(grad * nu, axis=-1)
        return nu - jt * dt - grad * bdotnu[..., None] + grad * gdotnu[..., None] * dt

    return SdeStepTerms(approx_div_jacobian=approx_div, approx_pullback_inverse_apply=apply)


def _divker_delta(model: SystemModel, nu, x, dB, dt, alpha_next: float):
    """Shared increment of the divergence / divergence-kernel covector SDE.

    d nu = ((grad s grad s^T - (dF)^T - a) nu - grad div F + hess s grad s
            + grad s lap s) dt - (grad s nu^T + hess s + a / s) dB

    with a = alpha_next evaluated at the next step and every field at (x, n).
    alpha_next = 0 reproduces the pure divergence step exactly.
    """
    nu = np.asarray(nu, dtype=float)
    x = np.asarray(x, dtype=float)
    dB = np.asarray(dB, dtype=float)
    grad = np.asarray(model.diffusion_gradient(x), dtype=float)
    gdotnu = np.sum(grad * nu, axis=-1)
    jt = np.asarray(model.drift_jacobian_transpose_apply(x, nu), dtype=float)
    ddiv = np.asarray(model.drift_divergence_gradient(x), dtype=float)
    hess_grad = np.asarray(model.diffusion_hessian_apply(x, grad), dtype=float)
    lap = np.asarray(model.diffusion_laplacian(x), dtype=float)
    nudotb = np.sum(nu * dB, axis=-1)
    hess_db = np.asarray(model.diffusion_hessian_apply(x, dB), dtype=float)
    drift_part = (
        grad * gdotnu[..., None] - jt - alpha_next * nu - ddiv + hess_grad + grad * lap[..., None]
    )
    noise_part = grad * nudotb[..., None] + hess_db
    if alpha_next != 0.0:
        s = model.sigma(x, check=False)
        noise_part = noise_part + alpha_next * dB / s[..., None]
    return drift_part * dt - noise_part


def sde_divergence_step(nu, x, dB, dt, model: SystemModel):
    """One Euler step of the pure-divergence covector SDE."""
    return np.asarray(nu, dtype=float) + _divker_delta(model, nu, x, dB, dt, 0.0)


def sde_divker_step(nu, x, dB, dt, alpha_next: float, model: SystemModel):
    """One Euler step of the divergence-kernel covector SDE; alpha_next is the
    schedule value at step n+1 (all other coefficients sit at step n)."""
    return np.asarray(nu, dtype=float) + _divker_delta(model, nu, x, dB, dt, float(alpha_next))


def sde_divker_noh0_step(nu, x, dB, dt, t_over_T, total_time, model: SystemModel):
    """One Euler step of the no-initial-score covector SDE:

    d nu = ((grad s grad s^T - (dF)^T) nu
            + (t/T)(hess s grad s + grad s lap s - grad div F)) dt
           - (grad s nu^T + (t/T) hess s + 1/(T s)) dB

    driven from nu_0 = 0; works with singular initial laws.
    """
    nu = np.asarray(nu, dtype=float)
    x = np.asarray(x, dtype=float)
    dB = np.asarray(dB, dtype=float)
    w = float(t_over_T)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"t_over_T must lie in [0, 1], got {w}")
    grad = np.asarray(model.diffusion_gradient(x), dtype=float)
    gdotnu = np.sum(grad * nu, axis=-1)
    jt = np.asarray(model.drift_jacobian_transpose_apply(x, nu), dtype=float)
    ddiv = np.asarray(model.drift_divergence_gradient(x), dtype=float)
    hess_grad = np.asarray(model.diffusion_hessian_apply(x, grad), dtype=float)
    lap = np.asarray(model.diffusion_laplacian(x), dtype=float)
    nudotb = np.sum(nu * dB, axis=-1)
    hess_db = np.asarray(model.diffusion_hessian_apply(x, dB), dtype=float)
    s = model.sigma(x, check=False)
    drift_part = grad * gdotnu[..., None] - jt + w * (hess_grad + grad * lap[..., None] - ddiv)
    noise_part = grad * nudotb[..., None] + w * hess_db + dB / (total_time * s[..., None])
    return nu + drift_part * dt - noise_part


def sde_kernel_score(path, model: SystemModel, beta: Schedule, init_score=None) -> Array:
    """Additive-noise continuous-limit kernel estimator on one path:

    beta_0 grad log h0(x0) + (1/sigma) sum_n (beta_n (dF)^T(x_n) dB_n - beta'_n dB_n).
    """
    if not model.is_additive:
        _raise_multiplicative()
    if beta.derivative_at is None:
        raise ScheduleError("the SDE kernel estimator needs an analytic beta derivative")
    N = path.steps
    dt = path.dt
    require_terminal_one(beta, N, N * dt)
    x = path.states[:-1]
    dB = path.increments
    sig = float(model.sigma(path.states[0], check=True))
    beta_vals = np.array([beta.value_at(n, n * dt, None) for n in range(N)])
    beta_derivs = np.array([beta.derivative_at(n * dt) for n in range(N)])
    jt = model.drift_jacobian_transpose_apply(x, dB)
    total = np.sum((beta_vals[:, None] * jt - beta_derivs[:, None] * dB) / sig, axis=0)
    beta0 = float(beta.value_at(0, 0.0, None))
    if beta0 != 0.0:
        if init_score is None:
            raise ValueError("beta_0 != 0 requires the initial score grad log h0")
        total = total + beta0 * np.asarray(init_score(path.states[0]), dtype=float)
    return total


def _raise_multiplicative():
    from .discrete import UnsupportedEstimatorError

    raise UnsupportedEstimatorError(
        "kernel score requires additive noise; use the divergence-kernel estimator"
    )


@dataclass
class DriveResult:
    """Terminal covector of a per-path fold plus its running sup-norm."""

    nu: Array
    max_abs_nu: float


def drive_covector(
    path,
    model: SystemModel,
    stepper,
    schedule: Optional[Schedule] = None,
    init_score=None,
    explosion_cap: float = EXPLOSION_CAP,
) -> DriveResult:
    """Fold one of the SDE steppers along a recorded path.

    ``stepper`` is one of :func:`sde_divergence_step`, :func:`sde_divker_step`
    (requires an alpha ``schedule``), or :func:`sde_divker_noh0_step` (starts
    from nu_0 = 0).  Raises :class:`CovectorExplosionError` with the step index
    when the covector sup-norm crosses ``explosion_cap``.
    """
    N = path.steps
    dt = path.dt
    T = N * dt
    if path.states.shape[-1] != model.dim:
        raise ValueError("path and model dimensions disagree")
    if stepper is sde_divker_noh0_step:
        nu = np.zeros(model.dim)
    else:
        if init_score is None:
            raise ValueError("this estimator requires the initial score grad log h0")
        nu = np.asarray(init_score(path.states[0]), dtype=float).copy()
    max_abs = float(np.max(np.abs(nu))) if N >= 0 else 0.0
    for n in range(N):
        x = path.states[n]
        dB = path.increments[n]
        if stepper is sde_divergence_step:
            nu = sde_divergence_step(nu, x, dB, dt, model)
        elif stepper is sde_divker_step:
            if schedule is None:
                raise ValueError("sde_divker_step requires an alpha schedule")
            a = float(schedule.value_at(n + 1, (n + 1) * dt, path.states[n + 1]))
            nu = sde_divker_step(nu, x, dB, dt, a, model)
        elif stepper is sde_divker_noh0_step:
            nu = sde_divker_noh0_step(nu, x, dB, dt, n / N, T, model)
        else:
            raise ValueError(f"unknown stepper {stepper!r}")
        norm = float(np.max(np.abs(nu)))
        if not np.isfinite(norm) or norm > explosion_cap:
            raise CovectorExplosionError(n + 1, norm)
        max_abs = max(max_abs, norm)
    return DriveResult(nu=nu, max_abs_nu=max_abs)


# ---------------------------------------------------------------------------
# Batch covector folds (consumed by the streaming runner)
# ---------------------------------------------------------------------------


class SdeDivKerFold:
    """Vectorized divergence / divergence-kernel covector recursion.

    alpha = None integrates the pure divergence SDE (identical arithmetic to a
    zero schedule).
    """

    def __init__(self, model: SystemModel, alpha: Optional[Schedule], init_score, dt: float, steps: int):
        self.model = model
        self.alpha = alpha
        self.init_score = init_score
        self.dt = dt
        self.steps = steps

    def start(self, x0: Array) -> Array:
        if self.init_score is None:
            raise ValueError("this estimator requires the initial score grad log h0")
        return np.asarray(self.init_score(x0), dtype=float).copy()

    def step(self, nu, x, b, n, x_next):
        a = 0.0 if self.alpha is None else float(
            self.alpha.value_at(n + 1, (n + 1) * self.dt, x_next)
        )
        return nu + _divker_delta(self.model, nu, x, b, self.dt, a)


class SdeNoH0Fold:
    """Vectorized no-initial-score covector recursion."""

    def __init__(self, model: SystemModel, dt: float, steps: int):
        self.model = model
        self.dt = dt
        self.steps = steps
        self.total_time = dt * steps

    def start(self, x0: Array) -> Array:
        return np.zeros_like(np.asarray(x0, dtype=float))

    def step(self, nu, x, b, n, x_next):
        return sde_divker_noh0_step(nu, x, b, self.dt, n / self.steps, self.total_time, self.model)


class SdeKernelFold:
    """Vectorized additive-noise kernel sum."""

    def __init__(self, model: SystemModel, beta: Schedule, init_score, dt: float, steps: int):
        if not model.is_additive:
            _raise_multiplicative()
        if beta.derivative_at is None:
            raise ScheduleError("the SDE kernel estimator needs an analytic beta derivative")
        require_terminal_one(beta, steps, steps * dt)
        self.model = model
        self.beta = beta
        self.init_score = init_score
        self.dt = dt
        self.steps = steps
        self.beta0 = float(beta.value_at(0, 0.0, None))
        if self.beta0 != 0.0 and init_score is None:
            raise ValueError("beta_0 != 0 requires the initial score grad log h0")

    def start(self, x0: Array) -> Array:
        if self.beta0 == 0.0:
            return np.zeros_like(np.asarray(x0, dtype=float))
        return self.beta0 * np.asarray(self.init_score(x0), dtype=float)

    def step(self, nu, x, b, n, x_next):
        t = n * self.dt
        bv = self.beta.value_at(n, t, None)
        bd = self.beta.derivative_at(t)
        jt = self.model.drift_jacobian_transpose_apply(x, b)
        sig = self.model.sigma(x, check=False)
        return nu + (bv * jt - bd * b) / sig[..., None]
