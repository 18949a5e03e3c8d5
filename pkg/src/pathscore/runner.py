"""Streaming Monte-Carlo driver: simulate paths and fold their covector
recursions in one pass, without retaining whole trajectories.

Paths are processed in fixed-size chunks of contiguous path ids; each chunk
draws its noise from the per-path counter streams, advances state and covector
together, and writes its slice of the preallocated outputs.  Chunk boundaries
and per-path streams do not depend on the worker count, so results are
bit-identical at any ``--threads`` setting.  Paths that leave the finite range
are flagged divergent, covectors that cross the explosion cap are flagged
capped; both are excluded from estimates and counted in the run report.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .discrete import (
    EXPLOSION_CAP,
    ScalarChain,
    ScalarDivKerFold,
    ScalarKernelFold,
    ScalarNoH0Fold,
    euler_chain_1d,
)
from .model import InitialDistribution, ModelError, NoiseKernel, SystemModel, gaussian_kernel
from .paths import SimulationPlan, path_rng
from .sde import SdeDivKerFold, SdeKernelFold, SdeNoH0Fold

Array = np.ndarray

DEFAULT_CHUNK = 4096


class SdeDynamics:
    """Euler-Maruyama state advance for a SystemModel."""

    def __init__(self, model: SystemModel, dt: float):
        self.model = model
        self.dt = dt
        self.dim = model.dim

    def draw(self, rng: np.random.Generator, steps: int) -> Array:
        return np.sqrt(self.dt) * rng.standard_normal((steps, self.dim))

    def sigma(self, x: Array) -> Array:
        return np.asarray(self.model.diffusion(x), dtype=float)

    def advance(self, x: Array, b: Array, s: Array) -> Array:
        return x + self.model.drift(x) * self.dt + s[..., None] * b


class MapDynamics:
    """General discrete chain advance x' = f(x) + sigma(x) b for a 1-D chain."""

    def __init__(self, chain: ScalarChain, kernel: NoiseKernel):
        if kernel.dim != 1:
            raise ValueError("MapDynamics drives 1-D chains")
        self.chain = chain
        self.kernel = kernel
        self.dim = 1

    def draw(self, rng: np.random.Generator, steps: int) -> Array:
        return np.reshape(self.kernel.sampler(rng, size=steps), (steps, 1))

    def sigma(self, x: Array) -> Array:
        return np.asarray(self.chain.sigma(x), dtype=float)[..., 0]

    def advance(self, x: Array, b: Array, s: Array) -> Array:
        return self.chain.f(x) + s[..., None] * b


@dataclass
class StreamResult:
    """Terminal states and covectors for a set of paths, with exclusion masks."""

    path_ids: Array
    terminal: Array
    nu: Array
    valid: Array
    divergent_step: Array
    capped_step: Array
    max_abs_nu: Array

    @property
    def n_divergent(self) -> int:
        return int(np.count_nonzero(self.divergent_step >= 0))

    @property
    def n_capped(self) -> int:
        return int(np.count_nonzero(self.capped_step >= 0))

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def valid_pairs(self):
        return self.terminal[self.valid], self.nu[self.valid], self.path_ids[self.valid]


def _run_chunk(dynamics, init, fold, seed, ids, steps, cap, out, offset):
    P = len(ids)
    dim = dynamics.dim
    x = np.empty((P, dim))
    noise = np.empty((P, steps, dim))
    for i, pid in enumerate(ids):
        rng = path_rng(seed, int(pid))
        x[i] = np.asarray(init.sampler(rng), dtype=float)
        noise[i] = dynamics.draw(rng, steps)
    nu = np.asarray(fold.start(x), dtype=float)
    alive = np.ones(P, dtype=bool)
    divstep = np.full(P, -1, dtype=int)
    capstep = np.full(P, -1, dtype=int)
    maxnu = np.max(np.abs(nu), axis=-1)
    check_every = model_mod.SIGMA_CHECK_MODE == "always"
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for n in range(steps):
            b = noise[:, n, :]
            s = dynamics.sigma(x)
            if (n == 0 and model_mod.SIGMA_CHECK_MODE != "off") or check_every:
                if not np.all(s[alive] > 0.0):
                    raise ModelError("sigma(x) <= 0 encountered during simulation")
            x_next = dynamics.advance(x, b, s)
            nu_next = np.asarray(fold.step(nu, x, b, n, x_next), dtype=float)
            was_alive = alive.copy()
            bad_x = ~np.all(np.isfinite(x_next), axis=-1)
            new_div = was_alive & bad_x
            divstep[new_div] = n + 1
            amax = np.max(np.abs(nu_next), axis=-1)
            amax = np.where(np.isfinite(amax), amax, np.inf)
            new_cap = was_alive & ~new_div & (amax > cap)
            capstep[new_cap] = n + 1
            maxnu[was_alive] = np.maximum(maxnu[was_alive], amax[was_alive])
            alive = was_alive & ~new_div & ~new_cap
            dead = ~alive
            if dead.any():
                x_next[dead] = 0.0
                nu_next[dead] = 0.0
            x, nu = x_next, nu_next
    sl = slice(offset, offset + P)
    out["terminal"][sl] = x
    out["nu"][sl] = nu
    out["valid"][sl] = alive
    out["divergent_step"][sl] = divstep
    out["capped_step"][sl] = capstep
    out["max_abs_nu"][sl] = maxnu


def stream_covectors(
    dynamics,
    init: InitialDistribution,
    fold,
    steps: int,
    n_paths: int,
    seed: int,
    *,
    path_ids=None,
    explosion_cap: float = EXPLOSION_CAP,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> StreamResult:
    """Run ``n_paths`` simulate-and-fold passes; returns terminal data per path.

    Chunking is fixed by ``chunk_size`` alone; ``threads`` only schedules the
    chunks, never changes results.
    """
    if path_ids is None:
        path_ids = np.arange(n_paths)
    path_ids = np.asarray(path_ids, dtype=int)
    P = len(path_ids)
    dim = dynamics.dim
    out = {
        "terminal": np.empty((P, dim)),
        "nu": np.empty((P, dim)),
        "valid": np.empty(P, dtype=bool),
        "divergent_step": np.empty(P, dtype=int),
        "capped_step": np.empty(P, dtype=int),
        "max_abs_nu": np.empty(P),
    }
    chunks = [
        (path_ids[start : start + chunk_size], start) for start in range(0, P, chunk_size)
    ]
    if threads <= 1 or len(chunks) == 1:
        for ids, offset in chunks:
            _run_chunk(dynamics, init, fold, seed, ids, steps, explosion_cap, out, offset)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    _run_chunk, dynamics, init, fold, seed, ids, steps, explosion_cap, out, offset
                )
                for ids, offset in chunks
            ]
            for f in futures:
                f.result()
    return StreamResult(path_ids=path_ids, **out)


# ---------------------------------------------------------------------------
# Estimator registry
# ---------------------------------------------------------------------------

ESTIMATORS = (
    "sde-kernel",
    "sde-div",
    "sde-divker",
    "sde-divker-noh0",
    "nstep-kernel",
    "nstep-div",
    "nstep-divker",
    "nstep-divker-noh0",
)


def build_fold(
    estimator: str,
    model: SystemModel,
    plan: SimulationPlan,
    init: InitialDistribution,
    alpha=None,
    beta=None,
):
    """Wire an estimator name to its (dynamics, fold) pair for the runner.

    nstep-* estimators use the exact 1-D step geometry and therefore require a
    one-dimensional model; the sde-* steppers work in any dimension.
    """
    dt = plan.dt
    dynamics = SdeDynamics(model, dt)
    if estimator.startswith("nstep"):
        if model.dim != 1:
            raise ValueError("nstep estimators need a 1-D model (exact step geometry)")
        chain = euler_chain_1d(model, dt)
        kernel = gaussian_kernel(1, dt)
        if estimator == "nstep-kernel":
            fold = ScalarKernelFold(chain, kernel, beta, init.score, dt, plan.steps)
        elif estimator == "nstep-div":
            fold = ScalarDivKerFold(chain, kernel, None, init.score, dt, plan.steps)
        elif estimator == "nstep-divker":
            if alpha is None:
                raise ValueError("nstep-divker requires an alpha schedule")
            fold = ScalarDivKerFold(chain, kernel, alpha, init.score, dt, plan.steps)
        elif estimator == "nstep-divker-noh0":
            fold = ScalarNoH0Fold(chain, kernel, dt, plan.steps)
        else:
            raise ValueError(f"unknown estimator '{estimator}'")
        return dynamics, fold
    if estimator == "sde-kernel":
        fold = SdeKernelFold(model, beta, init.score, dt, plan.steps)
    elif estimator == "sde-div":
        fold = SdeDivKerFold(model, None, init.score, dt, plan.steps)
    elif estimator == "sde-divker":
        if alpha is None:
            raise ValueError("sde-divker requires an alpha schedule")
        fold = SdeDivKerFold(model, alpha, init.score, dt, plan.steps)
    elif estimator == "sde-divker-noh0":
        fold = SdeNoH0Fold(model, dt, plan.steps)
    else:
        raise ValueError(f"unknown estimator '{estimator}'")
    return dynamics, fold


def run_estimator(
    estimator: str,
    model: SystemModel,
    plan: SimulationPlan,
    init: InitialDistribution,
    alpha=None,
    beta=None,
    explosion_cap: float = EXPLOSION_CAP,
    threads: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> StreamResult:
    dynamics, fold = build_fold(estimator, model, plan, init, alpha=alpha, beta=beta)
    return stream_covectors(
        dynamics,
        init,
        fold,
        plan.steps,
        plan.n_paths,
        plan.seed,
        explosion_cap=explosion_cap,
        chunk_size=chunk_size,
        threads=threads,
    )
