import numpy as np
import pytest

from pathscore.model import (
    ModelError,
    SystemModel,
    corrupted,
    cubic_sde_model,
    diffusion_hessian_dense,
    gaussian_initial,
    gaussian_kernel,
    linear_sde_model,
    lorenz96_model,
    point_mass_initial,
    validate_derivatives,
)

SHIPPED = [
    linear_sde_model(),
    cubic_sde_model("unit"),
    cubic_sde_model("bump"),
    lorenz96_model(),
]


def test_validate_linear_drift_exact_to_rounding():
    model = linear_sde_model(rate=1.0, noise=1.0)
    report = validate_derivatives(model, [np.array([0.7])], step=1e-5)
    assert report.passed
    assert all(c.max_abs_error <= 1e-8 for c in report.checks)


def test_validate_lorenz_at_ones():
    model = lorenz96_model()
    report = validate_derivatives(model, [np.ones(40)], step=1e-5)
    assert report.passed, report.failures()


def test_validate_flags_corrupted_callback():
    model = corrupted(lorenz96_model(), "drift_divergence_gradient", factor=2.0)
    report = validate_derivatives(model, [np.ones(40), np.linspace(-1, 1, 40)], step=1e-5)
    assert report.failures() == ["drift_divergence_gradient"]


def test_validate_rejects_nonfinite_model_output():
    model = linear_sde_model()
    bad = corrupted(model, "drift", factor=np.nan)
    with pytest.raises(ModelError, match="drift"):
        validate_derivatives(bad, [np.array([0.5])], step=1e-5)


def test_validate_rejects_bad_inputs():
    model = linear_sde_model()
    with pytest.raises(ValueError):
        validate_derivatives(model, [np.array([0.5])], step=0.0)
    with pytest.raises(ValueError):
        validate_derivatives(model, [np.array([np.inf])], step=1e-5)


@pytest.mark.parametrize("model", SHIPPED, ids=lambda m: m.name)
def test_shipped_models_validate_at_random_points(model):
    rng = np.random.default_rng(7)
    pts = rng.uniform(-2.0, 2.0, size=(20, model.dim))
    report = validate_derivatives(model, pts, step=1e-5)
    assert report.passed, str(report)


@pytest.mark.parametrize("model", SHIPPED, ids=lambda m: m.name)
def test_hessian_symmetry_and_laplacian_trace(model):
    rng = np.random.default_rng(21)
    for _ in range(100):
        x = rng.uniform(-2.0, 2.0, model.dim)
        u = rng.standard_normal(model.dim)
        w = rng.standard_normal(model.dim)
        hu = model.diffusion_hessian_apply(x, u)
        hw = model.diffusion_hessian_apply(x, w)
        assert np.dot(u, hw) == pytest.approx(np.dot(w, hu), rel=1e-10, abs=1e-12)
    for _ in range(5):
        x = rng.uniform(-2.0, 2.0, model.dim)
        trace = float(np.trace(diffusion_hessian_dense(model, x)))
        lap = float(model.diffusion_laplacian(x))
        assert lap == pytest.approx(trace, rel=1e-10, abs=1e-14)


def test_additive_ou_bundle_is_zero():
    model = linear_sde_model(rate=1.3, noise=0.7, dim=3)
    assert model.is_additive
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.standard_normal(3)
        assert np.all(model.diffusion_gradient(x) == 0.0)
        assert np.all(model.diffusion_hessian_apply(x, rng.standard_normal(3)) == 0.0)
        assert model.diffusion_laplacian(x) == 0.0


class TestLorenz96:
    def test_closed_forms_at_origin(self):
        model = lorenz96_model()
        x0 = np.zeros(40)
        assert model.diffusion(x0) == pytest.approx(3.0)
        assert np.all(model.diffusion_gradient(x0) == 0.0)
        assert model.diffusion_laplacian(x0) == pytest.approx(-40.0)

    def test_drift_divergence_at_ones(self):
        model = lorenz96_model()
        assert model.drift_divergence(np.ones(40)) == pytest.approx(-40.8)

    def test_laplacian_trace_identity(self):
        model = lorenz96_model()
        rng = np.random.default_rng(5)
        x = rng.uniform(-1.0, 1.0, 40)
        trace = float(np.trace(diffusion_hessian_dense(model, x)))
        assert model.diffusion_laplacian(x) == pytest.approx(trace, rel=1e-10)

    def test_small_dimension_rejected(self):
        with pytest.raises(ValueError, match="dim >= 4"):
            lorenz96_model(dim=3)

    def test_batched_callbacks(self):
        model = lorenz96_model()
        rng = np.random.default_rng(9)
        xs = rng.standard_normal((6, 40))
        nus = rng.standard_normal((6, 40))
        batch = model.drift_jacobian_transpose_apply(xs, nus)
        for i in range(6):
            single = model.drift_jacobian_transpose_apply(xs[i], nus[i])
            np.testing.assert_array_equal(batch[i], single)


def test_sigma_positivity_is_enforced():
    bad = corrupted(linear_sde_model(noise=1.0), "diffusion", factor=-1.0)
    with pytest.raises(ModelError, match="sigma"):
        bad.sigma(np.array([0.3]))


def test_gaussian_kernel_score_is_minus_b_over_variance():
    kern = gaussian_kernel(1, 0.002)
    b = np.array([0.03, -0.5, 1.7])
    np.testing.assert_array_equal(kern.log_density_gradient(b), -b / 0.002)
    # density integrates features: value at 0 for unit variance
    k1 = gaussian_kernel(1, 1.0)
    assert k1.density(np.array(0.0)) == pytest.approx(1.0 / np.sqrt(2 * np.pi))


def test_initial_distributions():
    rng = np.random.default_rng(0)
    g = gaussian_initial(2, mean=1.0, variance=4.0)
    x = g.sampler(rng)
    assert x.shape == (2,)
    np.testing.assert_allclose(g.score(np.array([3.0, 1.0])), [-0.5, 0.0])
    p = point_mass_initial(np.array([1.0, 2.0]))
    assert p.score is None
    np.testing.assert_array_equal(p.sampler(rng), [1.0, 2.0])
