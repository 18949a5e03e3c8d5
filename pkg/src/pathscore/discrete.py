"""Discrete-time score estimators: per-path covector recursions whose
conditional expectation given the terminal state equals the terminal score.

Three estimator families are implemented for the chain
``x_{n+1} = f(x_n) + sigma(x_n) b_n``:

* kernel score: differentiates the noise density (likelihood-ratio style);
  additive noise only, spreading weights ``beta_n`` with ``beta_N = 1``;
* divergence score: the recursion
  ``nu_{n+1} = g^{*-1} (nu_n - div g_*(x_n))`` built from the one-step map
  ``g_b(x) = f(x) + sigma(x) b`` and the covector
  ``div g_* = grad log |det g_*|``;
* divergence-kernel score: a schedule ``alpha`` shifts weight from the
  divergence pullback to the kernel term each step, taming covector growth
  under contraction while still handling state-dependent noise.  The
  reciprocal schedule ``alpha_n = 1/n`` removes the initial score from the
  formula entirely (the no-h0 variant, usable with singular initial laws).

Step geometry comes in two grades: exact closed forms for 1-D chains with
analytic map derivatives, and a finite-difference log-determinant gradient for
small ambient dimension (oracle-grade validation, not production estimation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import NoiseKernel, SystemModel, drift_jacobian_dense
from .schedules import Schedule, ScheduleError, constant_schedule, require_terminal_one

Array = np.ndarray

DET_FLOOR = 1e-12
EXPLOSION_CAP = 1e12


class SingularStepError(RuntimeError):
    """Step Jacobian determinant below the invertibility floor."""


class CovectorExplosionError(RuntimeError):
    """Covector norm crossed the explosion cap; carries the step index."""

    def __init__(self, step: int, norm: float):
        super().__init__(f"covector exploded at step {step}: |nu| = {norm:.3e}")
        self.step = step
        self.norm = norm


class UnsupportedEstimatorError(ValueError):
    """Estimator preconditions not met (e.g. kernel score with state-dependent noise)."""


@dataclass(frozen=True)
class ScalarChain:
    """1-D discrete map x' = f(x) + sigma(x) b with closed-form derivatives.

    All callables act elementwise on float arrays of any shape.
    """

    f: Callable[[Array], Array]
    df: Callable[[Array], Array]
    d2f: Callable[[Array], Array]
    sigma: Callable[[Array], Array]
    dsigma: Callable[[Array], Array]
    d2sigma: Callable[[Array], Array]
    is_additive: bool = False
    name: str = "chain"

    def sigma_checked(self, x: Array) -> Array:
        s = np.asarray(self.sigma(x), dtype=float)
        if not np.all(s > 0):
            raise ValueError(f"chain '{self.name}': sigma(x) must be positive")
        return s


def linear_chain(slope: float, noise: float = 1.0) -> ScalarChain:
    """Linear map f(x) = slope * x with constant noise scale."""
    if noise <= 0:
        raise ValueError("noise must be positive")
    return ScalarChain(
        f=lambda x: slope * np.asarray(x, dtype=float),
        df=lambda x: np.full_like(np.asarray(x, dtype=float), slope),
        d2f=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        sigma=lambda x: np.full_like(np.asarray(x, dtype=float), noise),
        dsigma=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        d2sigma=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        is_additive=True,
        name=f"linear({slope})",
    )


def euler_chain_1d(model: SystemModel, dt: float) -> ScalarChain:
    """Embed a 1-D SDE model as the map f(x) = x + F(x) dt.

    The map derivatives come from the model's bundle: in one dimension
    div F = F' and grad div F = F'', the diffusion gradient is sigma' and the
    Laplacian sigma''.
    """
    if model.dim != 1:
        raise ValueError("euler_chain_1d requires a 1-D model")
    if dt <= 0:
        raise ValueError("dt must be positive")

    def lift(fn_vec):
        def fn(x):
            x = np.asarray(x, dtype=float)
            return np.asarray(fn_vec(x[..., None]), dtype=float).reshape(x.shape)

        return fn

    drift = lift(model.drift)
    dF = lift(lambda xv: model.drift_divergence(xv))
    d2F = lift(model.drift_divergence_gradient)
    sig = lift(lambda xv: model.diffusion(xv))
    dsig = lift(model.diffusion_gradient)
    d2sig = lift(lambda xv: model.diffusion_laplacian(xv))
    return ScalarChain(
        f=lambda x: np.asarray(x, dtype=float) + drift(x) * dt,
        df=lambda x: 1.0 + dF(x) * dt,
        d2f=lambda x: d2F(x) * dt,
        sigma=sig,
        dsigma=dsig,
        d2sigma=d2sig,
        is_additive=model.is_additive,
        name=f"euler({model.name},dt={dt})",
    )


# ---------------------------------------------------------------------------
# Step geometry
# ---------------------------------------------------------------------------


@dataclass
class StepGeometry:
    """Jacobian of the one-step map g_b and the covector grad log |det g_*|.

    For 1-D chains both fields are scalar arrays; the generic grade returns a
    dense (dim, dim) Jacobian and a (dim,) covector.
    """

    jacobian: Array
    div_jacobian: Array


def _resolve_chain(system, dt_embedding: Optional[float]) -> ScalarChain:
    if isinstance(system, ScalarChain):
        return system
    if isinstance(system, SystemModel):
        if dt_embedding is None:
            raise ValueError("embedding an SDE model as a chain requires dt")
        return euler_chain_1d(system, dt_embedding)
    raise TypeError(f"expected ScalarChain or SystemModel, got {type(system)!r}")


def step_geometry_exact(system, x, b, dt_embedding: Optional[float] = None) -> StepGeometry:
    """Closed-form 1-D geometry: jacobian f'(x) + b sigma'(x), divergence
    (f''(x) + b sigma''(x)) / jacobian."""
    chain = _resolve_chain(system, dt_embedding)
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    j = chain.df(x) + b * chain.dsigma(x)
    if np.any(np.abs(j) <= DET_FLOOR):
        raise SingularStepError(f"step jacobian below determinant floor {DET_FLOOR}")
    div = (chain.d2f(x) + b * chain.d2sigma(x)) / j
    return StepGeometry(jacobian=j, div_jacobian=div)


def step_geometry_generic(
    model: SystemModel, x, b, probe_step: float = 1e-5, dt: float = None
) -> StepGeometry:
    """Geometry of the Euler-embedded map from model callbacks.

    The Jacobian is I + dF(x) dt + b (grad sigma)^T; its log-determinant
    gradient is taken by central finite differences coordinate by coordinate
    (2*dim extra determinant evaluations).  Oracle-grade for small dim.
    """
    if dt is None:
        raise ValueError("step_geometry_generic requires the embedding dt")
    if probe_step <= 0:
        raise ValueError("probe_step must be positive")
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)

    def map_jacobian(y):
        return (
            np.eye(model.dim)
            + drift_jacobian_dense(model, y) * dt
            + np.outer(b, model.diffusion_gradient(y))
        )

    def logabsdet(y):
        sign, lad = np.linalg.slogdet(map_jacobian(y))
        if sign == 0 or lad < np.log(DET_FLOOR):
            raise SingularStepError("singular step jacobian at probe point")
        return lad

    jac = map_jacobian(x)
    logabsdet(x)
    div = np.empty(model.dim)
    for i in range(model.dim):
        e = np.zeros(model.dim)
        e[i] = probe_step
        div[i] = (logabsdet(x + e) - logabsdet(x - e)) / (2 * probe_step)
    return StepGeometry(jacobian=jac, div_jacobian=div)


def pullback_inverse_apply(geometry: StepGeometry, nu: Array) -> Array:
    """Solve g^* w = nu, i.e. the linear system (g_*)^T w = nu; never forms an inverse."""
    j = np.asarray(geometry.jacobian)
    if j.ndim == 2:
        return np.linalg.solve(j.T, np.asarray(nu, dtype=float))
    return np.asarray(nu, dtype=float) / j


# ---------------------------------------------------------------------------
# One-step terms (also the integrands of the quadrature identities)
# ---------------------------------------------------------------------------


def transition_density(chain: ScalarChain, kernel: NoiseKernel, x0, x1) -> Array:
    """p(x0, x1) = sigma(x0)^{-dim} k((x1 - f(x0)) / sigma(x0)), vectorized over x0."""
    s = chain.sigma_checked(x0)
    b = (np.asarray(x1, dtype=float) - chain.f(x0)) / s
    return s ** (-float(kernel.dim)) * kernel.density(b)


def one_step_kernel_score_term(chain: ScalarChain, kernel: NoiseKernel, x0, x1) -> Array:
    """(1 / sigma(x0)) grad log k(b0) with b0 = (x1 - f(x0)) / sigma(x0)."""
    s = chain.sigma_checked(x0)
    b = (np.asarray(x1, dtype=float) - chain.f(x0)) / s
    return kernel.log_density_gradient(b) / s


def one_step_divergence_score_term(chain: ScalarChain, x0, x1, init_score) -> Array:
    """g^{*-1} (grad log h0(x0) - div g_*(x0)) at b0 = (x1 - f(x0)) / sigma(x0)."""
    s = chain.sigma_checked(x0)
    b = (np.asarray(x1, dtype=float) - chain.f(x0)) / s
    geom = step_geometry_exact(chain, x0, b)
    return (np.asarray(init_score(x0), dtype=float) - geom.div_jacobian) / geom.jacobian


def one_step_divker_score_term(
    chain: ScalarChain, kernel: NoiseKernel, x0, x1, init_score, alpha: float
) -> Array:
    """Convex combination of the kernel and divergence one-step terms."""
    kt = one_step_kernel_score_term(chain, kernel, x0, x1)
    dv = one_step_divergence_score_term(chain, x0, x1, init_score)
    return alpha * kt + (1.0 - alpha) * dv


# ---------------------------------------------------------------------------
# N-step per-path estimators
# ---------------------------------------------------------------------------


def _states_1d(path) -> Array:
    if path.dim != 1:
        raise ValueError("this estimator grade requires 1-D paths")
    return path.states[:, 0]


def nstep_kernel_score(path, system, kernel: NoiseKernel, beta: Schedule, init_score=None) -> Array:
    """Additive-noise kernel estimator
    beta_0 grad log h0(x0) + (1/sigma) sum_n (beta_{n+1} I - beta_n (df)^T(x_n)) grad log k(b_n).

    Requires beta_N = 1; a nonzero beta_0 requires the initial score.
    """
    N = path.steps
    dt = path.dt
    require_terminal_one(beta, N, N * dt)
    beta_vals = np.array([beta.value_at(n, n * dt, None) for n in range(N + 1)])
    if isinstance(system, ScalarChain):
        if not system.is_additive:
            raise UnsupportedEstimatorError(
                "kernel score requires additive noise; use the divergence-kernel estimator"
            )
        x = _states_1d(path)[:-1]
        b = path.increments[:, 0]
        sig = float(system.sigma_checked(x[:1])[0])
        grad_logk = np.asarray(kernel.log_density_gradient(b), dtype=float)
        terms = (beta_vals[1:] - beta_vals[:-1] * system.df(x)) * grad_logk / sig
        total = np.array([np.sum(terms)])
    elif isinstance(system, SystemModel):
        if not system.is_additive:
            raise UnsupportedEstimatorError(
                "kernel score requires additive noise; use the divergence-kernel estimator"
            )
        x = path.states[:-1]
        b = path.increments
        sig = float(system.sigma(path.states[0], check=True))
        grad_logk = np.asarray(kernel.log_density_gradient(b), dtype=float)
        # (df)^T g = g + dt (dF)^T g for the Euler embedding f = x + F dt
        jac_t = grad_logk + dt * system.drift_jacobian_transpose_apply(x, grad_logk)
        terms = (beta_vals[1:, None] * grad_logk - beta_vals[:-1, None] * jac_t) / sig
        total = np.sum(terms, axis=0)
    else:
        raise TypeError(f"expected ScalarChain or SystemModel, got {type(system)!r}")
    if beta_vals[0] != 0.0:
        if init_score is None:
            raise ValueError("beta_0 != 0 requires the initial score grad log h0")
        total = total + beta_vals[0] * np.atleast_1d(np.asarray(init_score(path.states[0]), dtype=float))
    return total


def _nstep_divker_recursion(
    path,
    system,
    kernel: Optional[NoiseKernel],
    alpha: Optional[Schedule],
    init_score,
    *,
    noh0: bool,
    explosion_cap: float = EXPLOSION_CAP,
    probe_step: float = 1e-5,
) -> Array:
    """Shared forward recursion; alpha = None means the constant-0 schedule
    (pure divergence), noh0 swaps in the (n/N, 1/N) weights and nu_0 = 0."""
    N = path.steps
    dt = path.dt
    scalar = isinstance(system, ScalarChain) or (
        isinstance(system, SystemModel) and system.dim == 1
    )
    chain = _resolve_chain(system, dt) if scalar else None
    if noh0:
        nu = np.zeros(path.dim)
    else:
        if init_score is None:
            raise ValueError("this estimator requires the initial score grad log h0")
        nu = np.atleast_1d(np.asarray(init_score(path.states[0]), dtype=float)).copy()
    if alpha is None and not noh0:
        alpha = constant_schedule(0.0)
    for n in range(N):
        x = path.states[n]
        b = path.increments[n]
        if scalar:
            geom = step_geometry_exact(chain, x[0], b[0])
        else:
            geom = step_geometry_generic(system, x, b, probe_step=probe_step, dt=dt)
        if noh0:
            weight = n / N
            core = pullback_inverse_apply(
                geom, nu - weight * np.atleast_1d(geom.div_jacobian)
            )
            s = chain.sigma_checked(x[0]) if scalar else system.sigma(x, check=True)
            kt = np.atleast_1d(kernel.log_density_gradient(b)) / s
            nu = core + kt / N
        else:
            a = float(alpha.value_at(n + 1, (n + 1) * dt, path.states[n + 1]))
            core = pullback_inverse_apply(geom, nu - np.atleast_1d(geom.div_jacobian))
            if a == 0.0:
                nu = core
            else:
                s = chain.sigma_checked(x[0]) if scalar else system.sigma(x, check=True)
                kt = np.atleast_1d(kernel.log_density_gradient(b)) / s
                nu = (1.0 - a) * core + a * kt
        norm = float(np.max(np.abs(nu)))
        if not np.isfinite(norm) or norm > explosion_cap:
            raise CovectorExplosionError(n + 1, norm)
    return nu


def nstep_divergence_score(path, system, init_score, **kw) -> Array:
    """Pure divergence recursion nu_{n+1} = g^{*-1}(nu_n - div g_*(x_n))."""
    return _nstep_divker_recursion(path, system, None, None, init_score, noh0=False, **kw)


def nstep_divker_forward(path, system, kernel: NoiseKernel, alpha: Schedule, init_score, **kw) -> Array:
    """Forward divergence-kernel recursion
    nu_{n+1} = (1 - a_{n+1}) g^{*-1}(nu_n - div g_*(x_n)) + a_{n+1} grad log k(b_n) / sigma(x_n).

    alpha identically 0 reproduces the pure divergence recursion bit-exactly;
    alpha identically 1 leaves only the last step's kernel term.
    """
    return _nstep_divker_recursion(path, system, kernel, alpha, init_score, noh0=False, **kw)


def nstep_divker_noh0(path, system, kernel: NoiseKernel, **kw) -> Array:
    """No-initial-score variant: nu_0 = 0,
    nu_{n+1} = g^{*-1}(nu_n - (n/N) div g_*(x_n)) + grad log k(b_n) / (N sigma(x_n))."""
    return _nstep_divker_recursion(path, system, kernel, None, None, noh0=True, **kw)


# ---------------------------------------------------------------------------
# Batch covector folds over 1-D chains (consumed by the streaming runner)
# ---------------------------------------------------------------------------


class ScalarDivKerFold:
    """Vectorized forward divergence-kernel recursion over a batch of 1-D paths.

    Arrays are (paths, 1); alpha = None means pure divergence (exact same
    arithmetic as alpha identically 0).
    """

    def __init__(self, chain: ScalarChain, kernel: NoiseKernel, alpha: Optional[Schedule], init_score, dt: float, steps: int):
        self.chain = chain
        self.kernel = kernel
        self.alpha = alpha
        self.init_score = init_score
        self.dt = dt
        self.steps = steps

    def start(self, x0: Array) -> Array:
        if self.init_score is None:
            raise ValueError("this estimator requires the initial score grad log h0")
        return np.asarray(self.init_score(x0), dtype=float).reshape(x0.shape).copy()

    def step(self, nu, x, b, n, x_next):
        # No determinant-floor raise here: a near-singular step sends the row
        # past the explosion cap and the runner excludes and counts it.
        chain = self.chain
        j = chain.df(x) + b * chain.dsigma(x)
        div = (chain.d2f(x) + b * chain.d2sigma(x)) / j
        core = (nu - div) / j
        if self.alpha is None:
            return core
        a = self.alpha.value_at(n + 1, (n + 1) * self.dt, x_next)
        kt = self.kernel.log_density_gradient(b) / chain.sigma(x)
        return (1.0 - a) * core + a * kt


class ScalarNoH0Fold:
    """Vectorized no-initial-score recursion over a batch of 1-D paths."""

    def __init__(self, chain: ScalarChain, kernel: NoiseKernel, dt: float, steps: int):
        self.chain = chain
        self.kernel = kernel
        self.dt = dt
        self.steps = steps

    def start(self, x0: Array) -> Array:
        return np.zeros_like(np.asarray(x0, dtype=float))

    def step(self, nu, x, b, n, x_next):
        chain = self.chain
        N = self.steps
        j = chain.df(x) + b * chain.dsigma(x)
        div = (chain.d2f(x) + b * chain.d2sigma(x)) / j
        core = (nu - (n / N) * div) / j
        kt = self.kernel.log_density_gradient(b) / chain.sigma(x)
        return core + kt / N


class ScalarKernelFold:
    """Vectorized additive-noise kernel sum over a batch of 1-D paths."""

    def __init__(self, chain: ScalarChain, kernel: NoiseKernel, beta: Schedule, init_score, dt: float, steps: int):
        if not chain.is_additive:
            raise UnsupportedEstimatorError(
                "kernel score requires additive noise; use the divergence-kernel estimator"
            )
        require_terminal_one(beta, steps, steps * dt)
        self.chain = chain
        self.kernel = kernel
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
        return self.beta0 * np.asarray(self.init_score(x0), dtype=float).reshape(x0.shape)

    def step(self, nu, x, b, n, x_next):
        b_next = self.beta.value_at(n + 1, (n + 1) * self.dt, None)
        b_now = self.beta.value_at(n, n * self.dt, None)
        g = self.kernel.log_density_gradient(b)
        return nu + (b_next * g - b_now * self.chain.df(x) * g) / self.chain.sigma(x)
