import math

import numpy as np
import pytest

from pathscore.discrete import linear_chain
from pathscore.model import (
    gaussian_initial,
    gaussian_kernel,
    linear_sde_model,
    point_mass_initial,
    SystemModel,
)
from pathscore.paths import (
    MATERIALIZE_GUARD,
    SimulationPlan,
    dump_paths,
    path_rng,
    reconstruct_states,
    simulate_discrete_path,
    simulate_sde_path,
    simulate_sde_batch,
)
from pathscore.runner import MapDynamics, SdeDynamics, stream_covectors


def zero_drift_model(dim=1, noise=1.0):
    return linear_sde_model(rate=0.0, noise=noise, dim=dim)


class ZeroFold:
    def start(self, x0):
        return np.zeros_like(x0)

    def step(self, nu, x, b, n, x_next):
        return nu


class TestSimulationPlan:
    def test_dt_divides_exactly(self):
        plan = SimulationPlan.from_dt(3.0, 0.002, 10, seed=1)
        assert plan.steps == 1500
        assert abs(plan.steps * plan.dt - 3.0) <= 1e-12 * 3.0

    def test_bad_dt_rejected(self):
        with pytest.raises(ValueError):
            SimulationPlan.from_dt(1.0, 0.3, 10, seed=1)

    def test_bad_geometry_rejected(self):
        with pytest.raises(ValueError):
            SimulationPlan(total_time=0.0, steps=10, n_paths=1, seed=1)
        with pytest.raises(ValueError):
            SimulationPlan(total_time=1.0, steps=10, n_paths=1, seed=-4)


def test_pure_noise_single_step():
    model = zero_drift_model()
    plan = SimulationPlan(total_time=1.0, steps=1, n_paths=2, seed=42)
    rec = simulate_sde_path(model, point_mass_initial(np.zeros(1)), plan, 0)
    np.testing.assert_array_equal(rec.states[1], rec.increments[0])


def test_same_seed_and_path_id_bit_identical():
    model = linear_sde_model()
    plan = SimulationPlan.from_dt(0.5, 0.002, 4, seed=99)
    init = gaussian_initial(1)
    a = simulate_sde_path(model, init, plan, 3)
    b = simulate_sde_path(model, init, plan, 3)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.increments, b.increments)


def test_path_id_outside_plan_rejected():
    model = linear_sde_model()
    plan = SimulationPlan(total_time=1.0, steps=5, n_paths=2, seed=0)
    with pytest.raises(ValueError):
        simulate_sde_path(model, gaussian_initial(1), plan, 2)


def test_streams_do_not_collide_across_paths():
    g0 = path_rng(7, 0).standard_normal(64)
    g1 = path_rng(7, 1).standard_normal(64)
    assert not np.allclose(g0, g1)


def test_reconstruction_matches_to_ulps():
    model = linear_sde_model(rate=0.7, noise=1.3)
    plan = SimulationPlan.from_dt(1.0, 0.01, 2, seed=5)
    rec = simulate_sde_path(model, gaussian_initial(1), plan, 1)
    replay = reconstruct_states(model, rec)
    for n in range(rec.steps + 1):
        a, b = rec.states[n, 0], replay[n, 0]
        assert abs(a - b) <= 4 * math.ulp(max(abs(a), 1e-300))


def test_batch_matches_per_path_exactly():
    model = linear_sde_model()
    plan = SimulationPlan.from_dt(0.2, 0.002, 6, seed=13)
    init = gaussian_initial(1)
    records = simulate_sde_batch(model, init, plan)
    res = stream_covectors(
        SdeDynamics(model, plan.dt), init, ZeroFold(), plan.steps, plan.n_paths, plan.seed
    )
    for rec in records:
        np.testing.assert_array_equal(res.terminal[rec.path_id], rec.states[-1])


def test_worker_count_does_not_change_results():
    model = linear_sde_model()
    plan = SimulationPlan.from_dt(0.5, 0.002, 4000, seed=77)
    init = gaussian_initial(1)
    dyn = SdeDynamics(model, plan.dt)
    one = stream_covectors(dyn, init, ZeroFold(), plan.steps, plan.n_paths, plan.seed, threads=1, chunk_size=512)
    four = stream_covectors(dyn, init, ZeroFold(), plan.steps, plan.n_paths, plan.seed, threads=4, chunk_size=512)
    np.testing.assert_array_equal(one.terminal, four.terminal)


def test_brownian_variance_statistics():
    # F = 0, sigma = 1: Var(x_N - x_0) = T within 3 standard errors
    model = zero_drift_model()
    plan = SimulationPlan.from_dt(1.0, 0.01, 10000, seed=3)
    init = point_mass_initial(np.zeros(1))
    res = stream_covectors(SdeDynamics(model, plan.dt), init, ZeroFold(), plan.steps, plan.n_paths, plan.seed)
    deltas = res.terminal[:, 0]
    var = np.var(deltas, ddof=1)
    se_var = var * np.sqrt(2.0 / (plan.n_paths - 1))
    assert abs(var - plan.total_time) <= 3 * se_var


def test_divergent_path_is_flagged_with_step_index():
    def drift(x):
        return x**3

    model = SystemModel(
        dim=1,
        drift=drift,
        drift_jacobian_transpose_apply=lambda x, nu: 3 * x**2 * nu,
        drift_divergence=lambda x: 3 * x[..., 0] ** 2,
        drift_divergence_gradient=lambda x: 6 * x,
        diffusion=lambda x: np.ones(x.shape[:-1]),
        diffusion_gradient=lambda x: np.zeros_like(x),
        diffusion_hessian_apply=lambda x, w: np.zeros_like(w),
        diffusion_laplacian=lambda x: np.zeros(x.shape[:-1]),
        is_additive=True,
        name="cubic-unstable",
    )
    plan = SimulationPlan(total_time=1.0, steps=5, n_paths=1, seed=0)
    rec = simulate_sde_path(model, point_mass_initial(np.array([1e200])), plan, 0)
    assert rec.divergent_at == 1
    assert np.all(np.isnan(rec.states[1:]))


class TestDiscreteChain:
    def test_zero_sigma_rejected(self):
        kern = gaussian_kernel(1, 1.0)
        with pytest.raises(ValueError, match="positive"):
            simulate_discrete_path(
                lambda x: x, kern, lambda x: np.zeros_like(x), point_mass_initial(np.zeros(1)), 3, 0, 0
            )

    def test_single_step_is_scaled_noise(self):
        kern = gaussian_kernel(1, 1.0)
        rec = simulate_discrete_path(
            lambda x: np.zeros_like(x),
            kern,
            lambda x: 2.0 * np.ones_like(x),
            point_mass_initial(np.array([0.5])),
            1,
            seed=4,
            path_id=0,
        )
        np.testing.assert_array_equal(rec.states[1], 2.0 * rec.increments[0])

    def test_linear_map_marginal_matches_gaussian_convolution(self):
        # x1 = 0.9 x0 + b with x0 ~ N(0,1), b ~ N(0,1): x1 ~ N(0, 1.81)
        chain = linear_chain(0.9)
        kern = gaussian_kernel(1, 1.0)
        dyn = MapDynamics(chain, kern)
        n = 100000
        res = stream_covectors(dyn, gaussian_initial(1), ZeroFold(), 1, n, seed=6)
        x1 = res.terminal[:, 0]
        se_mean = np.std(x1, ddof=1) / np.sqrt(n)
        assert abs(np.mean(x1)) <= 3 * se_mean
        var = np.var(x1, ddof=1)
        se_var = var * np.sqrt(2.0 / (n - 1))
        assert abs(var - 1.81) <= 3 * se_var
        # batch rows equal the per-path simulator
        for pid in (0, 1, 42):
            rec = simulate_discrete_path(
                chain.f, kern, chain.sigma, gaussian_initial(1), 1, seed=6, path_id=pid
            )
            np.testing.assert_array_equal(res.terminal[pid], rec.states[-1])


def test_materialize_guard():
    model = zero_drift_model()
    plan = SimulationPlan(total_time=1.0, steps=10**6, n_paths=10**6, seed=0)
    with pytest.raises(MemoryError):
        simulate_sde_batch(model, gaussian_initial(1), plan)


def test_dump_paths_roundtrip(tmp_path):
    model = linear_sde_model()
    plan = SimulationPlan.from_dt(0.01, 0.002, 2, seed=8)
    recs = simulate_sde_batch(model, gaussian_initial(1), plan)
    out = tmp_path / "paths.csv"
    dump_paths(recs, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "path_id,n,x_1,b_1"
    assert len(lines) == 1 + 2 * (plan.steps + 1)
    # full-precision states round-trip; terminal rows carry empty increments
    row1 = lines[1].split(",")
    assert float(row1[2]) == recs[0].states[0, 0]
    last = lines[1 + plan.steps].split(",")
    assert last[1] == str(plan.steps) and last[3] == ""
