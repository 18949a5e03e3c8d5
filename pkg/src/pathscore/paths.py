"""Path simulation for discrete chains and Euler time-discretized SDEs.

Noise is drawn from counter-based Philox streams: path ``p`` of a run seeded
with ``s`` owns the counter block ``p * 2**128`` of ``Philox(key=s)``, and a
path's draws (initial state first, then the increment block in step order)
always come from its own stream.  The same ``(seed, path_id)`` therefore yields
a bit-identical path no matter how paths are partitioned across workers, and a
path can be recomputed from its id alone -- the streaming estimators in
:mod:`pathscore.runner` rely on this instead of materializing whole runs when
``n_paths * steps * dim`` would be memory-bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import InitialDistribution, NoiseKernel, SystemModel

Array = np.ndarray

# Refuse to materialize path batches beyond this many floats (~1.6 GB); the
# streaming runner handles large runs without retaining full paths.
MATERIALIZE_GUARD = 200_000_000


@dataclass(frozen=True)
class SimulationPlan:
    """Run geometry: N steps of size dt = total_time / steps, n_paths, seed."""

    total_time: float
    steps: int
    n_paths: int
    seed: int

    def __post_init__(self):
        if self.total_time <= 0 or self.steps < 1 or self.n_paths < 1:
            raise ValueError("plan requires total_time > 0, steps >= 1, n_paths >= 1")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must fit in 64 bits")

    @property
    def dt(self) -> float:
        return self.total_time / self.steps

    @classmethod
    def from_dt(cls, total_time: float, dt: float, n_paths: int, seed: int) -> "SimulationPlan":
        steps = int(round(total_time / dt))
        if steps < 1 or abs(steps * dt - total_time) > 1e-12 * max(1.0, abs(total_time)):
            raise ValueError(f"dt={dt} does not divide total_time={total_time}")
        return cls(total_time=total_time, steps=steps, n_paths=n_paths, seed=seed)


@dataclass
class PathRecord:
    """One realized trajectory with its driving noise.

    ``states`` has shape (N+1, dim) and ``increments`` (N, dim); the chain
    relation x_{n+1} = step(x_n, b_n) is reconstructible from them.  A path
    that left the finite range is flagged with the first bad step index in
    ``divergent_at`` and nan states from there on.
    """

    dt: float
    states: Array
    increments: Array
    path_id: int
    divergent_at: Optional[int] = None

    @property
    def steps(self) -> int:
        return len(self.increments)

    @property
    def dim(self) -> int:
        return self.states.shape[-1]

    @property
    def terminal(self) -> Array:
        return self.states[-1]


def path_rng(seed: int, path_id: int) -> np.random.Generator:
    """Counter-based stream for one path: Philox(key=seed) at counter path_id * 2**128."""
    if path_id < 0:
        raise ValueError("path_id must be nonnegative")
    return np.random.Generator(np.random.Philox(key=seed, counter=path_id << 128))


def draw_initial_states(init: InitialDistribution, seed: int, path_ids) -> Array:
    """Initial states for a set of paths, each from its own stream."""
    xs = [np.asarray(init.sampler(path_rng(seed, int(p))), dtype=float) for p in path_ids]
    return np.stack(xs, axis=0)


def draw_path_noise(
    init: InitialDistribution,
    seed: int,
    path_ids,
    steps: int,
    dim: int,
    std: float,
) -> tuple:
    """Initial states (P, dim) and Gaussian increments (P, N, dim) per path stream."""
    n = len(path_ids)
    x0 = np.empty((n, dim))
    noise = np.empty((n, steps, dim))
    for i, p in enumerate(path_ids):
        rng = path_rng(seed, int(p))
        x0[i] = np.asarray(init.sampler(rng), dtype=float)
        noise[i] = std * rng.standard_normal((steps, dim))
    return x0, noise


def _finish_record(dt, states, increments, path_id) -> PathRecord:
    bad = np.nonzero(~np.all(np.isfinite(states), axis=-1))[0]
    divergent_at = int(bad[0]) if bad.size else None
    if divergent_at is not None:
        states[divergent_at:] = np.nan
    return PathRecord(
        dt=dt, states=states, increments=increments, path_id=path_id, divergent_at=divergent_at
    )


def simulate_sde_path(
    model: SystemModel, init: InitialDistribution, plan: SimulationPlan, path_id: int
) -> PathRecord:
    """Euler-Maruyama path x_{n+1} = x_n + F(x_n) dt + sigma(x_n) dB_n."""
    if path_id >= plan.n_paths:
        raise ValueError(f"path_id {path_id} outside plan with n_paths={plan.n_paths}")
    dt = plan.dt
    rng = path_rng(plan.seed, path_id)
    x = np.asarray(init.sampler(rng), dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"initial sampler returned shape {x.shape}, expected ({model.dim},)")
    increments = np.sqrt(dt) * rng.standard_normal((plan.steps, model.dim))
    states = np.empty((plan.steps + 1, model.dim))
    states[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(plan.steps):
            x = states[n]
            if not np.all(np.isfinite(x)):
                states[n + 1 :] = np.nan
                break
            # first step always validated; later steps follow SIGMA_CHECK_MODE
            s = model.sigma(x, check=True if n == 0 else None)
            states[n + 1] = x + model.drift(x) * dt + s * increments[n]
    return _finish_record(dt, states, increments, path_id)


def simulate_discrete_path(
    f,
    kernel: NoiseKernel,
    sigma,
    init: InitialDistribution,
    steps: int,
    seed: int,
    path_id: int,
) -> PathRecord:
    """General discrete chain x_{n+1} = f(x_n) + sigma(x_n) b_n, b_n ~ kernel.

    ``f`` and ``sigma`` act elementwise on state arrays of shape (dim,);
    sigma must be strictly positive everywhere it is evaluated.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = path_rng(seed, path_id)
    x = np.atleast_1d(np.asarray(init.sampler(rng), dtype=float))
    increments = kernel.sampler(rng, size=steps)
    increments = np.reshape(increments, (steps, kernel.dim))
    states = np.empty((steps + 1, x.shape[0]))
    states[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(steps):
            x = states[n]
            if not np.all(np.isfinite(x)):
                states[n + 1 :] = np.nan
                break
            s = np.asarray(sigma(x), dtype=float)
            if not np.all(s > 0):
                raise ValueError(f"sigma(x) must be positive; got {s} at step {n}")
            states[n + 1] = np.asarray(f(x), dtype=float) + s * increments[n]
    return _finish_record(1.0, states, increments, path_id)


def simulate_sde_batch(
    model: SystemModel, init: InitialDistribution, plan: SimulationPlan, path_ids=None
) -> list:
    """Materialize PathRecords for a set of paths (small runs and tests).

    Guarded against memory-bound use: large runs go through the streaming
    runner, which recomputes paths from (seed, path_id) instead.
    """
    if path_ids is None:
        path_ids = range(plan.n_paths)
    path_ids = list(path_ids)
    total = len(path_ids) * (plan.steps + 1) * model.dim
    if total > MATERIALIZE_GUARD:
        raise MemoryError(
            f"refusing to materialize {total} floats of paths; use the streaming runner"
        )
    return [simulate_sde_path(model, init, plan, p) for p in path_ids]


def reconstruct_states(model: SystemModel, record: PathRecord) -> Array:
    """Replay the increments through the model; used by the reconstruction test."""
    states = np.empty_like(record.states)
    states[0] = record.states[0]
    for n in range(record.steps):
        x = states[n]
        states[n + 1] = x + model.drift(x) * record.dt + model.sigma(x, check=False) * record.increments[n]
    return states


def dump_paths(records, out_path) -> None:
    """Write one CSV row per (path, step) at full precision, deterministic order.

    Rows n = 0..N-1 carry x_n and b_n; the terminal row n = N carries x_N with
    empty increment cells.
    """
    records = list(records)
    if not records:
        raise ValueError("no paths to dump")
    dim = records[0].dim
    header = (
        ["path_id", "n"]
        + [f"x_{i+1}" for i in range(dim)]
        + [f"b_{i+1}" for i in range(dim)]
    )
    lines = [",".join(header)]
    for rec in records:
        for n in range(rec.steps + 1):
            xs = [f"{v:.17g}" for v in rec.states[n]]
            bs = [f"{v:.17g}" for v in rec.increments[n]] if n < rec.steps else [""] * dim
            lines.append(",".join([str(rec.path_id), str(n)] + xs + bs))
    with open(out_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
