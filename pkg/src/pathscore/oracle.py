"""Deterministic 1-D ground truth: Chapman-Kolmogorov density propagation by
trapezoid quadrature, grid log-density scores, closed-form linear-SDE scores,
and quadrature conditional expectations for the one-step identities.

Everything here is independent of the Monte-Carlo estimators it validates:
densities evolve by dense quadrature of h_{n+1}(x) = int h_n(y) p(y, x) dy on
a uniform grid, and conditional expectations are ratios of trapezoid integrals
against h0(x0) p(x0, x1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .discrete import ScalarChain, transition_density
from .model import NoiseKernel

Array = np.ndarray

DENSITY_FLOOR = 1e-300
# Dense transition matrices are cached across steps up to this many nodes
# (the chain is time-homogeneous); larger grids fall back to blocked applies.
DENSE_MATRIX_NODES = 6000
_BLOCK_ROWS = 512


class OracleError(RuntimeError):
    """Quadrature contract violated (grid too narrow, underflow, off-grid query)."""


@dataclass
class GridDensity:
    """Density values on a uniform 1-D grid."""

    grid: Array
    values: Array

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.ndim != 1 or self.grid.size < 4:
            raise ValueError("grid must be a 1-D array with at least 4 nodes")
        steps = np.diff(self.grid)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ValueError("grid must be uniform")
        if self.values.shape != self.grid.shape:
            raise ValueError("values and grid shapes disagree")

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def mass(self) -> float:
        return float(np.trapezoid(self.values, dx=self.step))


def make_grid(lo: float = -8.0, hi: float = 8.0, spacing: float = 1e-3) -> Array:
    n = int(round((hi - lo) / spacing))
    return np.linspace(lo, hi, n + 1)


def gaussian_grid_density(grid: Array, mean: float = 0.0, variance: float = 1.0) -> GridDensity:
    grid = np.asarray(grid, dtype=float)
    vals = np.exp(-0.5 * (grid - mean) ** 2 / variance) / np.sqrt(2 * np.pi * variance)
    return GridDensity(grid=grid, values=vals)


def _trapezoid_weights(n: int, step: float) -> Array:
    w = np.full(n, step)
    w[0] = w[-1] = step / 2
    return w


def _check_boundary_mass(h: GridDensity, tol: float) -> None:
    edge = max(4, h.grid.size // 200)
    w = _trapezoid_weights(h.grid.size, h.step)
    boundary = float(np.sum((w * h.values)[:edge]) + np.sum((w * h.values)[-edge:]))
    if boundary > tol:
        raise OracleError(
            f"boundary mass {boundary:.3e} exceeds {tol:.1e}; widen the oracle grid"
        )


def _one_step(h: GridDensity, chain: ScalarChain, kernel: NoiseKernel, matrix=None) -> GridDensity:
    grid = h.grid
    weighted = _trapezoid_weights(grid.size, h.step) * h.values
    if matrix is not None:
        new_vals = weighted @ matrix
    else:
        new_vals = np.empty_like(h.values)
        for start in range(0, grid.size, _BLOCK_ROWS):
            block = grid[start : start + _BLOCK_ROWS]
            # p(y_i, x_j) for y over the whole grid, x over the block
            p = transition_density(chain, kernel, grid[:, None], block[None, :])
            new_vals[start : start + _BLOCK_ROWS] = weighted @ p
    if np.any(new_vals < -1e-12):
        warnings.warn("propagated density dipped below -1e-12; clamping at 0")
    return GridDensity(grid=grid, values=np.maximum(new_vals, 0.0))


def transition_matrix(grid: Array, chain: ScalarChain, kernel: NoiseKernel) -> Array:
    """Dense p(y_i, x_j) over the grid; reusable because the chain is homogeneous."""
    grid = np.asarray(grid, dtype=float)
    return transition_density(chain, kernel, grid[:, None], grid[None, :])


def propagate_density(
    h0,
    chain: ScalarChain,
    kernel: NoiseKernel,
    n_steps: int,
    *,
    grid: Array = None,
    boundary_tol: float = 1e-8,
    mass_tol: float = 1e-6,
) -> GridDensity:
    """Iterate h_{n+1}(x) = int h_n(y) p(y, x) dy by trapezoid quadrature.

    ``h0`` is a :class:`GridDensity`, or a scalar point-mass location (then
    ``grid`` is required and the first step evaluates p(x0, .) exactly,
    avoiding grid mollification of the delta).  Boundary mass is checked every
    step; total mass must stay within ``mass_tol`` of 1.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if isinstance(h0, GridDensity):
        h = h0
        remaining = n_steps
        _check_boundary_mass(h, boundary_tol)
    else:
        if grid is None:
            raise ValueError("point-mass initial condition requires an explicit grid")
        x0 = float(h0)
        grid = np.asarray(grid, dtype=float)
        h = GridDensity(grid=grid, values=np.asarray(transition_density(chain, kernel, x0, grid)))
        remaining = n_steps - 1
        _check_boundary_mass(h, boundary_tol)
    matrix = transition_matrix(h.grid, chain, kernel) if (remaining > 1 and h.grid.size <= DENSE_MATRIX_NODES) else None
    for _ in range(remaining):
        h = _one_step(h, chain, kernel, matrix)
        _check_boundary_mass(h, boundary_tol)
    mass = h.mass()
    if abs(mass - 1.0) > mass_tol:
        raise OracleError(f"propagated mass {mass!r} drifted beyond {mass_tol:.1e} of 1")
    return h


def grid_score(h: GridDensity, x: float) -> float:
    """d/dx log h at x: central log-differences at the two bracketing nodes,
    linearly interpolated.  Requires x at least two nodes inside the grid and
    density above the underflow floor."""
    grid, vals, step = h.grid, h.values, h.step
    if not grid[2] <= x <= grid[-3]:
        raise OracleError(f"score query x={x} too close to the grid edge")
    i = int(np.floor((x - grid[0]) / step))
    i = min(max(i, 1), grid.size - 3)
    needed = vals[i - 1 : i + 3]
    if np.any(needed < DENSITY_FLOOR):
        raise OracleError(f"density underflow near x={x}; score undefined there")
    s_i = (np.log(vals[i + 1]) - np.log(vals[i - 1])) / (2 * step)
    s_ip1 = (np.log(vals[i + 2]) - np.log(vals[i])) / (2 * step)
    theta = (x - grid[i]) / step
    return float((1 - theta) * s_i + theta * s_ip1)


def ou_analytic_score(a: float, sigma: float, s0_sq: float, T: float, x: float) -> float:
    """Score of the linear SDE dx = -a x dt + sigma dB from a N(0, s0_sq) start:
    -x / s_T^2 with s_T^2 = s0^2 e^{-2aT} + sigma^2 (1 - e^{-2aT}) / (2a)
    (a -> 0 limit: s0^2 + sigma^2 T)."""
    if a < 0:
        raise ValueError("a must be nonnegative")
    if sigma <= 0 or s0_sq < 0 or T < 0:
        raise ValueError("need sigma > 0, s0_sq >= 0, T >= 0")
    if a == 0.0:
        var = s0_sq + sigma**2 * T
    else:
        var = s0_sq * np.exp(-2 * a * T) - sigma**2 * np.expm1(-2 * a * T) / (2 * a)
    return float(-x / var)


def quadrature_conditional_expectation(
    chain: ScalarChain,
    kernel: NoiseKernel,
    h0: GridDensity,
    weight,
    x1: float,
) -> float:
    """Deterministic E[w(x0, x1) | x1] under the one-step chain:

        int w(x0, x1) h0(x0) p(x0, x1) dx0 / int h0(x0) p(x0, x1) dx0

    by trapezoid quadrature over the grid of h0.  ``weight`` is evaluated only
    where the posterior density is nonzero, so integrable singularities of the
    weight in zero-mass regions are harmless.
    """
    grid = h0.grid
    w_quad = _trapezoid_weights(grid.size, h0.step)
    dens = h0.values * np.asarray(transition_density(chain, kernel, grid, x1), dtype=float)
    denom = float(np.sum(w_quad * dens))
    if denom < DENSITY_FLOOR:
        raise OracleError(f"terminal point x1={x1} lies in a negligible-density region")
    mask = dens > 0.0
    wvals = np.zeros_like(dens)
    wvals[mask] = np.asarray(weight(grid[mask], x1), dtype=float)
    numer = float(np.sum(w_quad * dens * wvals))
    return numer / denom
