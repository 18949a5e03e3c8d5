"""System models: drift, scalar diffusion, and their analytic derivative bundles.

A :class:`SystemModel` describes the Ito dynamics ``dx = F(x) dt + sigma(x) dB``
in R^M with a scalar diffusion field multiplying an M-dimensional noise.  Every
callback is vectorized over leading axes: ``x`` has shape ``(..., dim)``,
vector-valued outputs have shape ``(..., dim)`` and scalar fields ``(...,)``.

The derivative bundle (Jacobian-transpose products, divergence of the drift and
its gradient, diffusion gradient / Hessian products / Laplacian) is supplied
analytically by each model; :func:`validate_derivatives` cross-checks it against
central finite differences.  Models are immutable after construction and safe
to evaluate concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

Array = np.ndarray

# Positivity checks on sigma: "always" validates every evaluation inside the
# simulation engines, "first" only the initial states, "off" disables.
SIGMA_CHECK_MODE = "always"


class ModelError(ValueError):
    """A model callback was evaluated outside its contract (e.g. sigma <= 0)."""


@dataclass(frozen=True)
class SystemModel:
    """Dynamics ``dx = F(x) dt + sigma(x) dB`` with an analytic derivative bundle.

    ``drift_jacobian_transpose_apply(x, nu)`` returns the covector product
    (dF)^T nu, ``diffusion_hessian_apply(x, w)`` the Hessian-vector product
    (d2 sigma) w.  ``is_additive`` declares that ``sigma`` does not depend on
    the state, in which case the gradient/Hessian/Laplacian callbacks must
    return zeros.
    """

    dim: int
    drift: Callable[[Array], Array]
    drift_jacobian_transpose_apply: Callable[[Array, Array], Array]
    drift_divergence: Callable[[Array], Array]
    drift_divergence_gradient: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    diffusion_gradient: Callable[[Array], Array]
    diffusion_hessian_apply: Callable[[Array, Array], Array]
    diffusion_laplacian: Callable[[Array], Array]
    is_additive: bool = False
    name: str = "custom"

    def sigma(self, x: Array, check: Optional[bool] = None) -> Array:
        """Evaluate the diffusion field, enforcing positivity.

        ``check=None`` consults the module-level SIGMA_CHECK_MODE; the engines
        pass an explicit flag so "first step only" sampling stays cheap.
        """
        s = np.asarray(self.diffusion(x), dtype=float)
        do_check = (SIGMA_CHECK_MODE != "off") if check is None else check
        if do_check and not np.all(s > 0.0):
            raise ModelError(
                f"model '{self.name}': sigma(x) <= 0 encountered (min sigma = {float(np.min(s))})"
            )
        return s


@dataclass(frozen=True)
class InitialDistribution:
    """Initial law of the state.

    ``score`` is the gradient of the log initial density; it is absent for
    singular laws (point masses), and estimators that need it refuse to run.
    """

    sampler: Callable[[np.random.Generator], Array]
    score: Optional[Callable[[Array], Array]] = None
    name: str = "custom"


def gaussian_initial(dim: int, mean: float = 0.0, variance: float = 1.0) -> InitialDistribution:
    """Isotropic Gaussian initial law N(mean, variance * I)."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    std = float(np.sqrt(variance))
    mu = np.full(dim, float(mean))

    def sampler(rng: np.random.Generator) -> Array:
        return mu + std * rng.standard_normal(dim)

    def score(x: Array) -> Array:
        return -(np.asarray(x, dtype=float) - mu) / variance

    return InitialDistribution(sampler=sampler, score=score, name=f"gaussian({mean},{variance})")


def point_mass_initial(x0: Array) -> InitialDistribution:
    """Deterministic initial state; the law is singular, so no score."""
    x0 = np.asarray(x0, dtype=float).copy()

    def sampler(rng: np.random.Generator) -> Array:
        return x0.copy()

    return InitialDistribution(sampler=sampler, score=None, name="point-mass")


@dataclass(frozen=True)
class NoiseKernel:
    """Per-step noise law b ~ k with density, score, and sampler.

    The built-in kernel is the isotropic Gaussian N(0, variance * I); its
    log-density gradient is exactly ``-b / variance``.
    """

    dim: int
    variance: float
    log_density_gradient: Callable[[Array], Array]
    sampler: Callable[..., Array]
    density: Callable[[Array], Array]


def gaussian_kernel(dim: int, variance: float) -> NoiseKernel:
    if variance <= 0:
        raise ValueError("kernel variance must be positive")
    norm = (2.0 * np.pi * variance) ** (-dim / 2.0)

    def log_density_gradient(b: Array) -> Array:
        return -np.asarray(b, dtype=float) / variance

    def sampler(rng: np.random.Generator, size=None) -> Array:
        shape = (dim,) if size is None else tuple(np.atleast_1d(size)) + (dim,)
        return np.sqrt(variance) * rng.standard_normal(shape)

    def density(b: Array) -> Array:
        # For dim == 1 the argument is treated elementwise (scalar convention,
        # used by the 1-D quadrature oracle); otherwise its last axis is the
        # noise dimension.
        b = np.asarray(b, dtype=float)
        ss = b * b if dim == 1 else np.sum(b * b, axis=-1)
        return norm * np.exp(-0.5 * ss / variance)

    return NoiseKernel(
        dim=dim,
        variance=float(variance),
        log_density_gradient=log_density_gradient,
        sampler=sampler,
        density=density,
    )


def diffusion_hessian_dense(model: SystemModel, x: Array) -> Array:
    """Recover the dense diffusion Hessian via dim unit-vector probes (tests only)."""
    eye = np.eye(model.dim)
    cols = [model.diffusion_hessian_apply(x, eye[k]) for k in range(model.dim)]
    return np.stack(cols, axis=-1)


def drift_jacobian_dense(model: SystemModel, x: Array) -> Array:
    """Dense dF matrix (entry (i, j) = d F^i / d x^j) via dim transpose probes."""
    eye = np.eye(model.dim)
    rows = [model.drift_jacobian_transpose_apply(x, eye[k]) for k in range(model.dim)]
    return np.stack(rows, axis=-2)


# ---------------------------------------------------------------------------
# Finite-difference validation of the derivative bundle
# ---------------------------------------------------------------------------

_REL_TOL = 1e-6
_ABS_FLOOR = 1e-9


@dataclass
class CallbackCheck:
    name: str
    max_abs_error: float
    max_rel_error: float
    passed: bool


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def __str__(self) -> str:
        lines = []
        for c in self.checks:
            status = "ok  " if c.passed else "FAIL"
            lines.append(
                f"{status} {c.name:34s} max_abs={c.max_abs_error:.3e} max_rel={c.max_rel_error:.3e}"
            )
        return "\n".join(lines)


def _fd_gradient(fn, x: Array, h: float) -> Array:
    """Central-difference gradient of a scalar or vector field at a point.

    Returns shape (dim,) for scalar fields and (dim, out_dim) with entry
    (j, i) = d out^i / d x^j for vector fields.
    """
    dim = x.shape[-1]
    cols = []
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = h
        cols.append((np.asarray(fn(x + e), dtype=float) - np.asarray(fn(x - e), dtype=float)) / (2 * h))
    return np.stack(cols, axis=0)


def _check_pair(name, analytic, fd, checks):
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(fd))):
        raise ModelError(f"non-finite output while validating callback '{name}'")
    err = np.abs(analytic - fd)
    ok = bool(np.all(err <= _ABS_FLOOR + _REL_TOL * np.abs(analytic)))
    rel = float(np.max(err / np.maximum(np.abs(analytic), _ABS_FLOOR)))
    prev = checks.get(name)
    if prev is None:
        checks[name] = CallbackCheck(name, float(np.max(err)), rel, ok)
    else:
        prev.max_abs_error = max(prev.max_abs_error, float(np.max(err)))
        prev.max_rel_error = max(prev.max_rel_error, rel)
        prev.passed = prev.passed and ok


def validate_derivatives(model: SystemModel, points, step: float) -> ValidationReport:
    """Compare every analytic derivative callback against central differences.

    First derivatives are differenced from the base fields (drift, diffusion);
    second derivatives are differenced from the model's own first-derivative
    callbacks so the finite-difference noise stays ~1e-10 and the 1e-6 gate is
    meaningful.  A callback passes when |analytic - fd| <= 1e-9 + 1e-6|analytic|
    at every tested point and component.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    checks: dict = {}
    eye = np.eye(model.dim)
    for x in points:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("test points must be finite")
        for fn, label in ((model.drift, "drift"), (model.diffusion, "diffusion")):
            out = np.asarray(fn(x), dtype=float)
            if not np.all(np.isfinite(out)):
                raise ModelError(f"non-finite {label} output at point {x}")

        # (j, i) = d F^i / d x^j
        jac_fd = _fd_gradient(model.drift, x, step)
        for k in range(model.dim):
            _check_pair(
                "drift_jacobian_transpose_apply",
                model.drift_jacobian_transpose_apply(x, eye[k]),
                jac_fd[:, k],
                checks,
            )
        _check_pair("drift_divergence", model.drift_divergence(x), np.trace(jac_fd), checks)
        _check_pair(
            "drift_divergence_gradient",
            model.drift_divergence_gradient(x),
            _fd_gradient(model.drift_divergence, x, step),
            checks,
        )
        _check_pair("diffusion_gradient", model.diffusion_gradient(x), _fd_gradient(model.diffusion, x, step), checks)
        hess_fd = _fd_gradient(model.diffusion_gradient, x, step)  # (j, i) = d_j d_i sigma
        for k in range(model.dim):
            _check_pair(
                "diffusion_hessian_apply",
                model.diffusion_hessian_apply(x, eye[k]),
                hess_fd[:, k],
                checks,
            )
        _check_pair("diffusion_laplacian", model.diffusion_laplacian(x), np.trace(hess_fd), checks)
    return ValidationReport(list(checks.values()))


# ---------------------------------------------------------------------------
# Shipped models
# ---------------------------------------------------------------------------


def linear_sde_model(rate: float = 1.0, noise: float = 1.0, dim: int = 1) -> SystemModel:
    """Linear drift F = -rate * x with constant (additive) diffusion."""
    if noise <= 0:
        raise ValueError("noise must be positive")
    r = float(rate)

    def zeros_like_state(x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def scalar_field(value):
        def fn(x):
            x = np.asarray(x, dtype=float)
            return np.full(x.shape[:-1], value)

        return fn

    return SystemModel(
        dim=dim,
        drift=lambda x: -r * np.asarray(x, dtype=float),
        drift_jacobian_transpose_apply=lambda x, nu: -r * np.asarray(nu, dtype=float),
        drift_divergence=scalar_field(-r * dim),
        drift_divergence_gradient=zeros_like_state,
        diffusion=scalar_field(float(noise)),
        diffusion_gradient=zeros_like_state,
        diffusion_hessian_apply=lambda x, w: np.zeros_like(np.asarray(w, dtype=float)),
        diffusion_laplacian=scalar_field(0.0),
        is_additive=True,
        name=f"linear-ou(rate={rate},noise={noise},dim={dim})",
    )


def _bump(x1d: Array) -> Array:
    return np.exp(-np.asarray(x1d, dtype=float) ** 2)


def cubic_sde_model(diffusion: str = "unit") -> SystemModel:
    """1-D cubic-drift benchmark dx = -x^3 dt + sigma(x) dB.

    ``diffusion="unit"`` is the additive case sigma = 1; ``diffusion="bump"``
    is the multiplicative case sigma(x) = 0.5 + exp(-x^2), whose derivatives
    are sigma' = -2x exp(-x^2) and sigma'' = (4x^2 - 2) exp(-x^2).
    """

    def drift(x):
        x = np.asarray(x, dtype=float)
        return -(x**3)

    def jac_t(x, nu):
        x = np.asarray(x, dtype=float)
        return -3.0 * x**2 * np.asarray(nu, dtype=float)

    def div(x):
        x = np.asarray(x, dtype=float)
        return -3.0 * x[..., 0] ** 2

    def div_grad(x):
        x = np.asarray(x, dtype=float)
        return -6.0 * x

    if diffusion == "unit":
        return SystemModel(
            dim=1,
            drift=drift,
            drift_jacobian_transpose_apply=jac_t,
            drift_divergence=div,
            drift_divergence_gradient=div_grad,
            diffusion=lambda x: np.ones(np.asarray(x, dtype=float).shape[:-1]),
            diffusion_gradient=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
            diffusion_hessian_apply=lambda x, w: np.zeros_like(np.asarray(w, dtype=float)),
            diffusion_laplacian=lambda x: np.zeros(np.asarray(x, dtype=float).shape[:-1]),
            is_additive=True,
            name="cubic(sigma=1)",
        )
    if diffusion == "bump":

        def sig(x):
            x = np.asarray(x, dtype=float)
            return 0.5 + _bump(x[..., 0])

        def sig_grad(x):
            x = np.asarray(x, dtype=float)
            return -2.0 * x * _bump(x[..., 0])[..., None]

        def sig_hess_apply(x, w):
            x = np.asarray(x, dtype=float)
            second = (4.0 * x[..., 0] ** 2 - 2.0) * _bump(x[..., 0])
            return second[..., None] * np.asarray(w, dtype=float)

        def sig_lap(x):
            x = np.asarray(x, dtype=float)
            return (4.0 * x[..., 0] ** 2 - 2.0) * _bump(x[..., 0])

        return SystemModel(
            dim=1,
            drift=drift,
            drift_jacobian_transpose_apply=jac_t,
            drift_divergence=div,
            drift_divergence_gradient=div_grad,
            diffusion=sig,
            diffusion_gradient=sig_grad,
            diffusion_hessian_apply=sig_hess_apply,
            diffusion_laplacian=sig_lap,
            is_additive=False,
            name="cubic(sigma=bump)",
        )
    raise ValueError(f"unknown diffusion '{diffusion}' (expected 'unit' or 'bump')")


def lorenz96_model(damping: float = 0.01, base_diffusion: float = 2.0, dim: int = 40) -> SystemModel:
    """Cyclic Lorenz-96 drift with a Gaussian-bump diffusion field.

    F^i = (x^{i+1} - x^{i-2}) x^{i-1} - x^i + 8 - damping (x^i)^2 with cyclic
    indices, and sigma(x) = base_diffusion + exp(-|x|^2 / 2).  The derivative
    bundle uses the closed forms:

        grad sigma      = -g x                  (g = exp(-|x|^2/2))
        hess sigma . w  = g (x <x, w> - w)
        lap sigma       = g (|x|^2 - dim)
        div F           = -dim - 2 damping sum_i x^i
        grad div F      = -2 damping [1, ..., 1]
    """
    if dim < 4:
        raise ValueError("lorenz96 needs dim >= 4 for distinct cyclic indices")
    if damping < 0:
        raise ValueError("damping must be nonnegative")
    if base_diffusion <= 0:
        raise ValueError("base_diffusion must be positive")
    c = float(damping)

    def drift(x):
        x = np.asarray(x, dtype=float)
        xp1 = np.roll(x, -1, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        return (xp1 - xm2) * xm1 - x + 8.0 - c * x**2

    def jac_t(x, nu):
        x = np.asarray(x, dtype=float)
        nu = np.asarray(nu, dtype=float)
        # [ (dF)^T nu ]_j = nu_{j-1} x_{j-2} - nu_{j+2} x_{j+1}
        #                   + nu_{j+1} (x_{j+2} - x_{j-1}) + nu_j (-1 - 2c x_j)
        return (
            np.roll(nu, 1, axis=-1) * np.roll(x, 2, axis=-1)
            - np.roll(nu, -2, axis=-1) * np.roll(x, -1, axis=-1)
            + np.roll(nu, -1, axis=-1) * (np.roll(x, -2, axis=-1) - np.roll(x, 1, axis=-1))
            + nu * (-1.0 - 2.0 * c * x)
        )

    def div(x):
        x = np.asarray(x, dtype=float)
        return -float(dim) - 2.0 * c * np.sum(x, axis=-1)

    def div_grad(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(-2.0 * c, x.shape).copy()

    def gauss(x):
        x = np.asarray(x, dtype=float)
        return np.exp(-0.5 * np.sum(x * x, axis=-1))

    def sig(x):
        return base_diffusion + gauss(x)

    def sig_grad(x):
        x = np.asarray(x, dtype=float)
        return -gauss(x)[..., None] * x

    def sig_hess_apply(x, w):
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        xw = np.sum(x * w, axis=-1)
        return gauss(x)[..., None] * (x * xw[..., None] - w)

    def sig_lap(x):
        x = np.asarray(x, dtype=float)
        return gauss(x) * (np.sum(x * x, axis=-1) - float(dim))

    return SystemModel(
        dim=dim,
        drift=drift,
        drift_jacobian_transpose_apply=jac_t,
        drift_divergence=div,
        drift_divergence_gradient=div_grad,
        diffusion=sig,
        diffusion_gradient=sig_grad,
        diffusion_hessian_apply=sig_hess_apply,
        diffusion_laplacian=sig_lap,
        is_additive=False,
        name=f"lorenz96(damping={damping},base={base_diffusion},dim={dim})",
    )


def corrupted(model: SystemModel, callback: str, factor: float = 2.0) -> SystemModel:
    """Return a copy with one derivative callback scaled; fault-injection helper."""
    original = getattr(model, callback)

    def bad(*args):
        return factor * np.asarray(original(*args), dtype=float)

    return replace(model, **{callback: bad, "name": model.name + f"+corrupt({callback})"})
