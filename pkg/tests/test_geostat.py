"""Inference engine: kernels, Laplace fit oracles, optimization, prediction."""

import numpy as np
import pytest

from geoattn import attnfield, geostat, numkit, simgen
from geoattn.attnfield import AttnHyper, build_field
from geoattn.errors import AllRestartsFailed, UnsupportedSmoothness
from geoattn.geostat import (
    CovarianceBuilder,
    KernelSpec,
    ModelSpec,
    build_design,
    kernel_matrix,
    laplace_fit,
    matern_cov,
    optimize_hyperparameters,
    predict,
    predict_insample,
    separable_cov,
)
from conftest import random_export


def make_data(n_times=4, locs=(20, 30), seed=0, **kw):
    return simgen.simulate(
        simgen.SimConfig(n_times=n_times, locs_per_time=locs, seed=seed, **kw)
    )


class TestMatern:
    def test_zero_lag_is_variance(self):
        assert matern_cov(0.0, 2.5, 0.3, 1.5) == pytest.approx(2.5)

    def test_nu_half_is_exponential(self):
        d = np.linspace(0, 2, 7)
        np.testing.assert_allclose(
            matern_cov(d, 1.7, 0.4, 0.5), 1.7 * np.exp(-d / 0.4), rtol=1e-14,
        )

    def test_nu_three_halves_hand_value(self):
        val = matern_cov(0.3, 1.0, 0.3, 1.5)
        assert val == pytest.approx((1 + np.sqrt(3)) * np.exp(-np.sqrt(3)))
        assert val == pytest.approx(0.4834, abs=1e-4)

    def test_unsupported_smoothness(self):
        with pytest.raises(UnsupportedSmoothness):
            matern_cov(0.1, 1.0, 0.3, 1.0)

    def test_continuity_at_zero(self):
        for nu in (0.5, 1.5, 2.5):
            assert matern_cov(1e-14, 3.0, 0.5, nu) == pytest.approx(3.0, rel=1e-9)


class TestSeparable:
    def test_zero_lag_product(self):
        spatial = lambda d: matern_cov(d, 2.0, 0.3, 0.5)
        temporal = lambda d: matern_cov(d, 3.0, 1.0, 0.5)
        assert separable_cov(0.0, 0.0, spatial, temporal) == pytest.approx(6.0)

    def test_unit_temporal_factor(self):
        spatial = lambda d: matern_cov(d, 2.0, 0.3, 1.5)
        temporal = lambda d: np.ones_like(np.asarray(d, dtype=float))
        d = np.linspace(0, 1, 11)
        np.testing.assert_allclose(
            separable_cov(d, d, spatial, temporal), spatial(d), rtol=1e-14,
        )

    def test_exponential_product_equals_gneiting_gamma_zero(self):
        # algebraic identity checked over a grid of space-time lags
        rng = np.random.default_rng(1)
        d_s = rng.uniform(0, 2, 100)
        d_t = rng.uniform(0, 5, 100)
        spatial = lambda d: matern_cov(d, 1.0, 0.25, 0.5)
        temporal = lambda d: matern_cov(d, 1.0, 0.25, 0.5)
        product = separable_cov(d_s, d_t, spatial, temporal)
        joint = simgen.gneiting_cov(d_s, d_t, 0.25, 0.25, 0.0)
        np.testing.assert_allclose(product, joint, atol=1e-12)


class TestKernelMatrix:
    def test_spd_across_optimizer_bounds(self):
        data = make_data(n_times=3, locs=(15, 25), seed=5)
        rng = np.random.default_rng(7)
        for _ in range(25):
            sigma2 = float(np.exp(rng.uniform(*geostat.DEFAULT_BOUNDS["log_sigma2"])))
            phi_s = float(np.exp(rng.uniform(*geostat.DEFAULT_BOUNDS["log_phi_s"])))
            phi_t = float(np.exp(rng.uniform(*geostat.DEFAULT_BOUNDS["log_phi_t"])))
            rho = float(np.exp(rng.uniform(*geostat.DEFAULT_BOUNDS["log_rho"])))
            for kernel in (
                KernelSpec(family="gneiting", sigma2=sigma2, phi_s=phi_s, phi_t=phi_t),
                KernelSpec(family="matern", sigma2=sigma2, rho=rho, nu=1.5),
            ):
                numkit.cholesky(kernel_matrix(kernel, data), jitter=1e-8)

    def test_builder_matches_direct_evaluation(self):
        data = make_data(n_times=2, locs=(8, 12), seed=3)
        kernel = KernelSpec(family="gneiting", sigma2=1.7, phi_s=0.3, phi_t=0.5, gamma=0.4)
        builder = CovarianceBuilder(data.x, data.y, data.t)
        d_s = np.sqrt(
            (data.x[:, None] - data.x[None, :]) ** 2
            + (data.y[:, None] - data.y[None, :]) ** 2
        )
        d_t = np.abs(data.t[:, None] - data.t[None, :]).astype(float)
        direct = 1.7 * np.exp(-(d_s / 0.3 + d_t / 0.5 + 0.4 * d_s * d_t))
        np.testing.assert_allclose(builder(kernel), direct, rtol=1e-13)


class TestModelSpecValidation:
    def test_mbg_requires_design(self):
        with pytest.raises(ValueError):
            ModelSpec(kind="mbg", kernel=KernelSpec())

    def test_hybrid_requires_offset_and_attention(self):
        with pytest.raises(ValueError):
            ModelSpec(kind="hybrid", kernel=KernelSpec(), offset=np.zeros(3))

    def test_gat_only_takes_nothing(self):
        with pytest.raises(ValueError):
            ModelSpec(kind="gat_only", kernel=KernelSpec())
        ModelSpec(kind="gat_only")  # bare is fine


def hybrid_spec(data, seed=0, theta1=0.0, theta2=0.0, sigma2=1.0):
    field = build_field(random_export(len(data), seed=seed), len(data))
    offset = np.zeros(len(data))
    return ModelSpec(
        kind="hybrid",
        kernel=KernelSpec(family="gneiting", sigma2=sigma2),
        offset=offset,
        attention=(field, AttnHyper(theta1, theta2)),
    )


class TestLaplaceFit:
    def test_gaussian_hook_matches_kriging_oracle(self):
        # closed-form GLS/kriging on the same prior, via an independent solve
        data = make_data(n_times=2, locs=(50, 50), seed=11)
        assert len(data) == 100
        kernel = KernelSpec(family="gneiting", sigma2=0.8, phi_s=0.3, phi_t=0.4)
        spec = ModelSpec(kind="mbg", kernel=kernel, design=build_design(data))
        rng = np.random.default_rng(2)
        y = rng.standard_normal(len(data))
        obs_sd = 0.7
        fit = laplace_fit(data, spec, gaussian_response=y, gaussian_obs_sd=obs_sd)

        sigma_u = (
            spec.fixed_effect_sd ** 2 * (spec.design @ spec.design.T)
            + kernel_matrix(kernel, data)
            + 1e-8 * np.eye(len(data))
        )
        oracle = sigma_u @ np.linalg.solve(sigma_u + obs_sd ** 2 * np.eye(len(data)), y)
        assert np.abs(fit.u_mode - oracle).max() <= 1e-8

    def test_large_trials_consistency_on_grid(self):
        # z/n = logistic(eta*) almost exactly; the mode must sit near eta*
        g = np.linspace(0.05, 0.95, 50)
        eta_star = 1.5 * np.sin(2 * np.pi * g) - 0.5
        n_i = 1_000_000
        p_star = 1.0 / (1.0 + np.exp(-eta_star))
        data = simgen.Dataset(
            ids=np.arange(50), x=g, y=g[::-1].copy(), t=np.ones(50, dtype=int),
            n_tested=np.full(50, n_i), n_pos=np.round(n_i * p_star).astype(int),
            covariates=np.zeros((50, 0)),
        )
        kernel = KernelSpec(family="matern", sigma2=4.0, rho=0.5, nu=1.5)
        spec = ModelSpec(kind="mbg", kernel=kernel, design=np.ones((50, 1)))
        fit = laplace_fit(data, spec)
        # the converged flag is deliberately not asserted: its absolute
        # gradient tolerance is in count units and sits at round-off for
        # n_i = 1e6; the mode accuracy below is the contract under test
        assert np.abs(fit.u_mode - eta_star).max() <= 0.05

    def test_zero_variance_kernel_matches_ridge_logistic_oracle(self):
        data = make_data(n_times=3, locs=(40, 50), seed=13)
        kernel = KernelSpec(family="gneiting", sigma2=1e-10, phi_s=0.25, phi_t=0.25)
        design = build_design(data)
        spec = ModelSpec(kind="mbg", kernel=kernel, design=design)
        fit = laplace_fit(data, spec)

        # independent iteratively-reweighted oracle for the same penalized mode
        prior_prec = 1.0 / spec.fixed_effect_sd ** 2
        beta = np.zeros(design.shape[1])
        z, trials = data.n_pos, data.n_tested
        for _ in range(200):
            eta = design @ beta
            p = 1.0 / (1.0 + np.exp(-eta))
            w = trials * p * (1 - p)
            grad = design.T @ (z - trials * p) - prior_prec * beta
            hess = design.T @ (w[:, None] * design) + prior_prec * np.eye(len(beta))
            step = np.linalg.solve(hess, grad)
            beta = beta + step
            if np.abs(step).max() < 1e-13:
                break
        assert np.abs(fit.beta_hat - beta).max() <= 1e-3

    def test_objective_trace_is_nondecreasing(self):
        data = make_data(n_times=3, locs=(20, 30), seed=17)
        spec = ModelSpec(
            kind="mbg",
            kernel=KernelSpec(family="gneiting", sigma2=0.5),
            design=build_design(data),
        )
        fit = laplace_fit(data, spec)
        trace = np.array(fit.psi_trace)
        assert np.all(np.diff(trace) >= -1e-9 * np.maximum(1.0, np.abs(trace[:-1])))
        assert fit.converged

    def test_hybrid_fit_converges(self):
        data = make_data(n_times=2, locs=(25, 30), seed=19)
        spec = hybrid_spec(data, seed=3)
        fit = laplace_fit(data, spec)
        assert fit.converged
        assert np.isfinite(fit.logml)

    def test_requires_positive_trials(self):
        data = make_data(n_times=2, locs=(5, 6), seed=1)
        data.n_tested[0] = 0
        spec = ModelSpec(
            kind="mbg", kernel=KernelSpec(), design=build_design(data),
        )
        with pytest.raises(ValueError):
            laplace_fit(data, spec)


class TestOptimize:
    def test_one_parameter_matches_grid_search(self):
        data = make_data(n_times=2, locs=(40, 50), seed=23)
        template = ModelSpec(
            kind="mbg",
            kernel=KernelSpec(family="gneiting", sigma2=0.3, phi_s=0.25, phi_t=0.25),
            design=build_design(data),
        )
        lo, hi = np.log(1e-3), np.log(9.0)
        result = optimize_hyperparameters(
            data, template, bounds={"log_sigma2": (lo, hi)}, restarts=1, seed=0,
        )
        grid = np.linspace(lo, hi, 200)
        builder = CovarianceBuilder(data.x, data.y, data.t)
        logml = []
        from dataclasses import replace
        for g in grid:
            spec_g = replace(template, kernel=replace(template.kernel, sigma2=float(np.exp(g))))
            logml.append(laplace_fit(data, spec_g, sigma_builder=builder).logml)
        best_grid = grid[int(np.argmax(logml))]
        cell = grid[1] - grid[0]
        assert abs(np.log(result.spec.kernel.sigma2) - best_grid) <= cell

    def test_range_recovery_within_factor_two(self):
        # simulation oracle: phi_s = phi_t = 0.25 generated the data. The
        # spatial range is identifiable and must come back within a factor
        # of two. The temporal range is identifiable only from above here
        # (adjacent times are already decorrelated: exp(-1/0.25) ~ 0.018, so
        # the likelihood is flat below ~0.1); it must come back within the
        # factor-two band from above, and anywhere below only if the fit is
        # at least as supported as the generating value (flatness).
        from dataclasses import replace

        data = make_data(n_times=10, locs=(60, 100), seed=29)
        assert len(data) >= 600
        template = ModelSpec(
            kind="mbg",
            kernel=KernelSpec(
                family="gneiting", sigma2=1.0, phi_s=0.1, phi_t=0.1, gamma=0.75,
            ),
            design=build_design(data),
        )
        result = optimize_hyperparameters(data, template, restarts=1, seed=1, max_iter=120)
        k = result.spec.kernel
        assert 0.125 <= k.phi_s <= 0.5
        assert k.phi_t <= 0.5
        if k.phi_t < 0.125:
            at_truth = replace(result.spec, kernel=replace(k, phi_t=0.25))
            logml_truth = laplace_fit(data, at_truth).logml
            assert result.fit.logml >= logml_truth - 1.0

    def test_identical_seeds_identical_traces(self):
        data = make_data(n_times=2, locs=(15, 20), seed=31)
        template = ModelSpec(
            kind="mbg", kernel=KernelSpec(family="gneiting"), design=build_design(data),
        )
        a = optimize_hyperparameters(data, template, restarts=2, seed=5, max_iter=25)
        b = optimize_hyperparameters(data, template, restarts=2, seed=5, max_iter=25)
        assert len(a.trace) == len(b.trace)
        for ra, rb in zip(a.trace, b.trace):
            assert ra["params"] == rb["params"]
            assert ra["logml"] == rb["logml"]

    def test_unknown_bound_name_rejected(self):
        data = make_data(n_times=2, locs=(5, 8), seed=1)
        template = ModelSpec(
            kind="mbg", kernel=KernelSpec(family="gneiting"), design=build_design(data),
        )
        with pytest.raises(ValueError):
            optimize_hyperparameters(data, template, bounds={"log_rho": (0, 1)})

    def test_all_restarts_failed(self):
        data = make_data(n_times=2, locs=(5, 8), seed=1)
        template = ModelSpec(
            kind="mbg", kernel=KernelSpec(family="gneiting"), design=build_design(data),
        )
        data.n_tested[:] = 1
        data.n_pos[:] = 0
        # poison the objective through non-finite bounds instead of data
        with pytest.raises(ValueError):
            optimize_hyperparameters(
                data, template, bounds={"log_sigma2": (0.0, np.inf)},
            )


class TestPredict:
    def fitted_mbg(self, seed=37, locs=(25, 35), n_times=3):
        data = make_data(n_times=n_times, locs=locs, seed=seed)
        spec = ModelSpec(
            kind="mbg",
            kernel=KernelSpec(family="gneiting", sigma2=0.6, phi_s=0.25, phi_t=0.25),
            design=build_design(data),
        )
        fit = laplace_fit(data, spec, want_operators=True)
        return data, spec, fit

    def test_insample_matches_mode_roughly(self):
        data, spec, fit = self.fitted_mbg()
        pred = predict_insample(fit, n_draws=3000, seed=0)
        mode_prev = simgen.logistic(fit.u_mode)
        assert np.abs(pred.mean - mode_prev).max() <= 0.08
        assert np.all((pred.lo <= pred.mean) & (pred.mean <= pred.hi))

    def test_interpolation_consistency_at_observed_location(self):
        data, spec, fit = self.fitted_mbg()
        j = 7
        new = data.subset(np.array([j]))
        pred = predict(fit, new, n_draws=4000, seed=3)
        fitted_prev = simgen.logistic(fit.u_mode[j])
        sd_prev = pred.sd_linpred[0] * fitted_prev * (1 - fitted_prev)
        assert abs(pred.mean[0] - fitted_prev) <= max(2 * sd_prev, 0.02)

    def test_monte_carlo_interval_stability(self):
        data, spec, fit = self.fitted_mbg()
        new = data.subset(np.arange(0, len(data), 3))
        a = predict(fit, new, n_draws=4000, seed=101)
        b = predict(fit, new, n_draws=4000, seed=202)
        assert np.abs(a.lo - b.lo).max() <= 0.01
        assert np.abs(a.hi - b.hi).max() <= 0.01

    def test_nested_quantile_levels(self):
        data, spec, fit = self.fitted_mbg(seed=41, locs=(15, 20))
        pred95 = predict_insample(fit, n_draws=2000, seed=7, level=0.95)
        pred90 = predict_insample(fit, n_draws=2000, seed=7, level=0.90)
        assert np.all(pred90.lo >= pred95.lo - 1e-12)
        assert np.all(pred90.hi <= pred95.hi + 1e-12)

    def test_hybrid_offset_passthrough(self):
        # sigma2 -> 0 and tau -> +inf zero both latent fields
        data = make_data(n_times=2, locs=(20, 25), seed=43)
        n = len(data)
        field = build_field(random_export(n, seed=9), n)
        rng = np.random.default_rng(5)
        offset = rng.uniform(-2.0, 0.5, n)
        spec = ModelSpec(
            kind="hybrid",
            kernel=KernelSpec(family="gneiting", sigma2=1e-12),
            offset=offset[: n - 5],
            attention=(
                attnfield.restrict_field(field, np.arange(n - 5)),
                AttnHyper(theta1=18.0, theta2=0.0),
            ),
        )
        train = data.subset(np.arange(n - 5))
        test = data.subset(np.arange(n - 5, n))
        fit = laplace_fit(train, spec, want_operators=True)
        pred = predict(
            fit, test, n_draws=4000, seed=11,
            new_offsets=offset[n - 5:],
            joint_field=field,
            obs_nodes=np.arange(n - 5),
            new_nodes=np.arange(n - 5, n),
        )
        expected = simgen.logistic(offset[n - 5:])
        assert np.abs(pred.mean - expected).max() <= 2e-3

    def test_gat_only_prediction_degenerate_intervals(self):
        pred = geostat.gat_only_prediction(np.arange(3), np.array([0.2, -0.1, 1.2]))
        assert np.all(pred.lo == pred.mean) and np.all(pred.hi == pred.mean)
        assert pred.mean[1] == pytest.approx(1e-6)
        assert pred.mean[2] == pytest.approx(1 - 1e-6)

    def test_prediction_csv_roundtrip(self, tmp_path):
        data, spec, fit = self.fitted_mbg(seed=47, locs=(10, 12), n_times=2)
        pred = predict_insample(fit, n_draws=500, seed=1)
        path = tmp_path / "pred.csv"
        geostat.write_prediction_csv(pred, path)
        back = geostat.read_prediction_csv(path)
        np.testing.assert_array_equal(back.ids, pred.ids)
        np.testing.assert_array_equal(back.mean, pred.mean)
        np.testing.assert_array_equal(back.hi, pred.hi)


class TestBetaRecovery:
    def test_beta_hat_within_three_posterior_sd(self):
        # probabilistic contract: averaged over 5 seeds, >= 4/5 of the
        # coefficient coverage events hold per run on average
        fractions = []
        for seed in range(5):
            data = make_data(n_times=5, locs=(25, 35), seed=100 + seed)
            template = ModelSpec(
                kind="mbg",
                kernel=KernelSpec(family="gneiting", sigma2=0.6, phi_s=0.25, phi_t=0.25),
                design=build_design(data),
            )
            result = optimize_hyperparameters(data, template, restarts=1, seed=seed, max_iter=60)
            fit = result.fit
            true_beta = np.concatenate([[simgen.SimConfig().beta0], data.beta])
            inside = np.abs(fit.beta_hat - true_beta) <= 3 * fit.beta_sd
            fractions.append(inside.mean())
        assert np.mean(fractions) >= 0.8
