import numpy as np
import pytest

from pathscore.estimate import (
    BinGrid,
    bin_and_average,
    bin_and_average_arrays,
    linear_response_deviation,
    linear_response_deviation_arrays,
    read_scores_csv,
    write_deviations_csv,
    write_scores_csv,
)
from pathscore.model import gaussian_initial, linear_sde_model
from pathscore.paths import PathRecord, SimulationPlan
from pathscore.runner import run_estimator


def make_pairs(xs, nus):
    recs = [
        PathRecord(dt=1.0, states=np.array([[x]]), increments=np.zeros((0, 1)), path_id=i)
        for i, x in enumerate(xs)
    ]
    return list(zip(recs, [np.atleast_1d(v) for v in nus]))


class TestBinGrid:
    def test_geometry(self):
        grid = BinGrid(-1.8, 1.8, 9)
        assert grid.width == pytest.approx(0.4)
        np.testing.assert_allclose(grid.centers[0], -1.6)
        np.testing.assert_allclose(grid.centers[-1], 1.6)

    def test_validation(self):
        with pytest.raises(ValueError):
            BinGrid(1.0, -1.0, 5)
        with pytest.raises(ValueError):
            BinGrid(0.0, 1.0, 0)


class TestBinAndAverage:
    def test_degenerate_single_bin(self):
        grid = BinGrid(0.0, 1.0, 1)
        out = bin_and_average(make_pairs([0.2, 0.5, 0.7], [3.0, 3.0, 3.0]), grid)
        e = out.estimates[0]
        assert e.count == 3
        assert e.mean_nu[0] == 3.0
        assert e.se_nu[0] == 0.0
        assert e.log_density == pytest.approx(np.log(1.0))
        assert e.mean_coord == pytest.approx((0.2 + 0.5 + 0.7) / 3)

    def test_count_arithmetic_example(self):
        # counts [10,20,40,20,10] over 5 bins of width 0.4, n=100:
        # middle bin log density = log(40 / (100 * 0.4)) = 0
        grid = BinGrid(0.0, 2.0, 5)
        xs = (
            [0.2] * 10 + [0.6] * 20 + [1.0] * 40 + [1.4] * 20 + [1.8] * 10
        )
        out = bin_and_average(make_pairs(xs, [0.0] * 100), grid)
        assert [e.count for e in out.estimates] == [10, 20, 40, 20, 10]
        assert out.estimates[2].log_density == pytest.approx(0.0)

    def test_overflow_bucket_and_count_conservation(self):
        grid = BinGrid(-1.0, 1.0, 4)
        xs = [-5.0, -0.5, 0.0, 0.5, 2.0, 1.0]  # hi edge itself overflowsationally
        out = bin_and_average(make_pairs(xs, range(6)), grid)
        assert out.overflow == 3
        assert sum(e.count for e in out.estimates) + out.overflow == 6

    def test_half_open_bins(self):
        grid = BinGrid(0.0, 1.0, 2)
        out = bin_and_average_arrays(np.array([0.5]), np.array([[1.0]]), grid)
        assert out.estimates[0].count == 0
        assert out.estimates[1].count == 1

    def test_permutation_invariance_is_exact(self):
        rng = np.random.default_rng(0)
        xs = rng.uniform(-2, 2, 500)
        nus = rng.standard_normal((500, 1))
        ids = np.arange(500)
        grid = BinGrid(-1.8, 1.8, 9)
        a = bin_and_average_arrays(xs, nus, grid, path_ids=ids)
        perm = rng.permutation(500)
        b = bin_and_average_arrays(xs[perm], nus[perm], grid, path_ids=ids[perm])
        for ea, eb in zip(a.estimates, b.estimates):
            np.testing.assert_array_equal(ea.mean_nu, eb.mean_nu)
            np.testing.assert_array_equal(ea.se_nu, eb.se_nu)
            assert ea.count == eb.count

    def test_log_density_normalization(self):
        rng = np.random.default_rng(1)
        xs = rng.standard_normal(2000)
        grid = BinGrid(-1.8, 1.8, 9)
        out = bin_and_average_arrays(xs, np.zeros((2000, 1)), grid)
        total = sum(np.exp(e.log_density) * grid.width for e in out.estimates)
        total += out.overflow / out.n_total
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_min_count_flagging_and_se(self):
        grid = BinGrid(0.0, 1.0, 2)
        out = bin_and_average_arrays(np.array([0.1, 0.6, 0.7]), np.array([[1.0], [2.0], [4.0]]), grid)
        assert out.estimates[0].flagged and out.estimates[1].flagged
        assert np.isnan(out.estimates[0].se_nu[0])  # count 1: no finite SE
        # values [2, 4]: sample var 2, se = sqrt(2 / 2) = 1
        assert out.estimates[1].se_nu[0] == pytest.approx(1.0)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            bin_and_average([], BinGrid(0, 1, 2))


class TestLinearResponseDeviation:
    def test_zero_observable_isolates_offset(self):
        pairs = make_pairs([0.1, 0.2, 0.3], [5.0, -2.0, 9.0])
        out = linear_response_deviation(pairs, lambda x: 0.0, np.ones(1))
        assert out.mean == 1.0
        assert all(row[3] == 1.0 for row in out.rows)

    def test_analytic_score_control_run(self):
        # substitute the exact analytic score for nu_T: the deviation
        # Phi(x_T) <nu, v> + 1 with Phi(x) = mean(x) must average to zero
        model = linear_sde_model(rate=1.0, noise=1.0)
        plan = SimulationPlan.from_dt(1.0, 0.002, 10000, seed=31)
        res = run_estimator("sde-div", model, plan, gaussian_initial(1), explosion_cap=np.inf)
        term = res.terminal[:, 0]
        r2 = (1 - plan.dt) ** 2
        var = r2**plan.steps + plan.dt * (1 - r2**plan.steps) / (1 - r2)
        nus = (-term / var)[:, None]
        out = linear_response_deviation_arrays(
            res.terminal, nus, res.path_ids, lambda x: float(np.mean(x)), np.ones(1)
        )
        assert abs(out.mean) <= 3 * out.se

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            linear_response_deviation([], lambda x: 0.0, np.ones(1))


def test_density_fd_self_consistency_on_ou():
    """The two faces of one estimate: finite differences of the empirical
    log-density across neighboring cells and the binned covector means must
    agree (combined statistical error plus a small differencing allowance).
    Fine cells keep the O(width^2) differencing terms inside the bands."""
    model = linear_sde_model(rate=1.0, noise=1.0)
    plan = SimulationPlan.from_dt(3.0, 0.002, 20000, seed=99)
    res = run_estimator("nstep-divker-noh0", model, plan, gaussian_initial(1))
    term, nus, ids = res.valid_pairs()
    grid = BinGrid(-1.8, 1.8, 18)
    out = bin_and_average_arrays(term[:, 0], nus, grid, path_ids=ids)
    w = grid.width
    checked = 0
    for i in range(1, grid.n_bins - 1):
        e, lo, hi = out.estimates[i], out.estimates[i - 1], out.estimates[i + 1]
        if min(e.count, lo.count, hi.count) < 200:
            continue
        checked += 1
        fd = (hi.log_density - lo.log_density) / (2 * w)
        se_fd = np.sqrt(1.0 / hi.count + 1.0 / lo.count) / (2 * w)
        allowance = 3 * (e.se_nu[0] + se_fd + 0.02)
        assert abs(e.mean_nu[0] - fd) <= allowance, f"bin {i}: {e.mean_nu[0]} vs {fd}"
    assert checked >= 10


class TestCsvRoundTrip:
    def test_scores_csv(self, tmp_path):
        rng = np.random.default_rng(2)
        xs = rng.uniform(-1.8, 1.8, 300)
        nus = rng.standard_normal((300, 2))
        out = bin_and_average_arrays(xs, nus, BinGrid(-1.8, 1.8, 9), path_ids=np.arange(300))
        path = tmp_path / "scores.csv"
        write_scores_csv(path, out)
        cols = read_scores_csv(path)
        assert list(cols) == [
            "bin_index", "bin_center", "count", "log_density",
            "mean_nu_1", "mean_nu_2", "se_nu_1", "se_nu_2",
        ]
        np.testing.assert_array_equal(cols["count"], [e.count for e in out.estimates])
        np.testing.assert_array_equal(cols["mean_nu_1"], [e.mean_nu[0] for e in out.estimates])

    def test_deviations_csv(self, tmp_path):
        pairs = make_pairs([0.1, -0.4], [2.0, 3.0])
        out = linear_response_deviation(pairs, lambda x: float(np.mean(x)), np.ones(1))
        path = tmp_path / "deviations.csv"
        write_deviations_csv(path, out)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "path_id,phi,nu_dot_v,deviation"
        assert len(lines) == 3
        assert float(lines[1].split(",")[3]) == pytest.approx(0.1 * 2.0 + 1.0)
