"""Tests for the GP surrogate: regression math against dense oracles,
hyperparameter estimation, sequential design selection, and the two-stage
temporal reconstruction."""

import math

import numpy as np
import pytest

from zonetrace import emulator as em
from zonetrace.errors import ConfigError, MissingArtifact, OutOfRange

ORACLE_TOL = 1e-10
DESIGN_REPRO_TOL = 1e-8
DENSE_PREDICT_TOL = 1e-12


def dense_gp(design, outputs, lam, jitter=em.JITTER):
    """Brute-force GP quantities via explicit inverses (test oracle)."""
    design = np.atleast_2d(design)
    outputs = outputs if outputs.ndim == 2 else outputs[:, None]
    n, d = design.shape
    diff = design[:, None, :] - design[None, :, :]
    a = np.exp(-(diff ** 2 @ lam)) + jitter * np.eye(n)
    h = np.hstack([np.ones((n, 1)), design])
    a_inv = np.linalg.inv(a)
    mmat = h.T @ a_inv @ h
    beta = np.linalg.inv(mmat) @ h.T @ a_inv @ outputs
    resid = outputs - h @ beta
    sigma = resid.T @ a_inv @ resid / (n - d - 1)
    return a, h, a_inv, mmat, beta, resid, sigma


def dense_predict(design, outputs, lam, stars, jitter=em.JITTER):
    a, h, a_inv, mmat, beta, resid, sigma = dense_gp(design, outputs, lam, jitter)
    stars = np.atleast_2d(stars)
    diff = stars[:, None, :] - design[None, :, :]
    r = np.exp(-(diff ** 2 @ lam))
    hs = np.hstack([np.ones((stars.shape[0], 1)), stars])
    mean = hs @ beta + r @ a_inv @ resid
    u = hs.T - h.T @ a_inv @ r.T
    cvar = (1.0 - np.einsum("kn,nm,km->k", r, a_inv, r)
            + np.einsum("mk,mj,jk->k", u, np.linalg.inv(mmat), u))
    return mean, np.maximum(cvar, 0.0)


def dense_log_posterior(design, outputs, lam, jitter=em.JITTER):
    a, h, a_inv, mmat, beta, resid, sigma = dense_gp(design, outputs, lam, jitter)
    n, d = np.atleast_2d(design).shape
    m = d + 1
    q = sigma.shape[0]
    return (-0.5 * q * np.linalg.slogdet(a)[1]
            - 0.5 * q * np.linalg.slogdet(mmat)[1]
            - 0.5 * (n - m) * np.linalg.slogdet((n - m) * sigma)[1])


class TestCorrelation:
    def test_zero_distance_is_one(self):
        theta = np.array([[0.3, 0.7]])
        assert em.correlation(theta, theta, np.array([2.0, 5.0]))[0, 0] == 1.0

    def test_unit_distance_unit_precision(self):
        a = np.array([[0.0]])
        b = np.array([[1.0]])
        value = em.correlation(a, b, np.array([1.0]))[0, 0]
        assert value == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(size=(4, 3))
        b = rng.uniform(size=(5, 3))
        lam = np.array([0.5, 2.0, 9.0])
        assert np.array_equal(em.correlation(a, b, lam),
                              em.correlation(b, a, lam).T)


class TestFitGls:
    def test_reduces_to_ols_when_points_are_uncorrelated(self):
        rng = np.random.default_rng(11)
        # spread the points so every cross-correlation collapses to zero
        design = (np.arange(12)[:, None] + rng.uniform(size=(12, 2))) / 12.0
        lam = np.array([5e4, 5e4])
        outputs = rng.normal(size=(12, 3))
        fit = em.fit_gls(design, outputs, lam)
        h = np.hstack([np.ones((12, 1)), design])
        beta_ols = np.linalg.solve(h.T @ h, h.T @ outputs)
        assert np.max(np.abs(fit.beta - beta_ols)) <= ORACLE_TOL

    def test_linear_data_has_zero_output_covariance(self):
        rng = np.random.default_rng(5)
        design = rng.uniform(size=(10, 2))
        beta_true = np.array([[0.4], [1.5], [-2.0]])
        outputs = np.hstack([np.ones((10, 1)), design]) @ beta_true
        fit = em.fit_gls(design, outputs, np.array([1.0, 1.0]))
        assert np.max(np.abs(fit.sigma)) <= ORACLE_TOL

    def test_duplicated_output_columns_duplicate_beta(self):
        rng = np.random.default_rng(6)
        design = rng.uniform(size=(9, 2))
        outputs = rng.normal(size=(9, 2))
        both = np.hstack([outputs, outputs])
        fit = em.fit_gls(design, both, np.array([2.0, 3.0]))
        assert np.array_equal(fit.beta[:, :2], fit.beta[:, 2:])

    def test_needs_more_points_than_coefficients(self):
        design = np.eye(3)
        with pytest.raises(ConfigError):
            em.fit_gls(design, np.ones((3, 1)), np.ones(3))

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(21)
        design = rng.uniform(size=(5, 2))
        outputs = rng.normal(size=(5, 2))
        lam = np.array([3.0, 0.7])
        fit = em.fit_gls(design, outputs, lam)
        _, _, _, _, beta, _, sigma = dense_gp(design, outputs, lam)
        assert np.max(np.abs(fit.beta - beta)) <= ORACLE_TOL
        assert np.max(np.abs(fit.sigma - sigma)) <= ORACLE_TOL


class TestLambdaLogPosterior:
    def test_constant_shift_is_absorbed_by_the_intercept(self):
        rng = np.random.default_rng(8)
        design = rng.uniform(size=(14, 2))
        outputs = rng.normal(size=(14, 2))
        lam = np.array([1.5, 4.0])
        base = em.lambda_log_posterior(design, outputs, lam)
        shifted = em.lambda_log_posterior(design, outputs + 17.3, lam)
        assert shifted == pytest.approx(base, rel=1e-8)

    def test_minimal_system_matches_dense_oracle(self):
        design = np.array([[0.1], [0.45], [0.9]])
        outputs = np.array([[0.3], [-1.1], [0.7]])
        lam = np.array([2.0])
        mine = em.lambda_log_posterior(design, outputs, lam)
        oracle = dense_log_posterior(design, outputs, lam)
        assert mine == pytest.approx(oracle, abs=ORACLE_TOL)

    def test_output_scaling_shifts_by_the_determinant_identity(self):
        rng = np.random.default_rng(9)
        design = rng.uniform(size=(12, 2))
        outputs = rng.normal(size=(12, 1))
        lam = np.array([1.0, 2.0])
        s = 7.5
        base = em.lambda_log_posterior(design, outputs, lam)
        scaled = em.lambda_log_posterior(design, s * outputs, lam)
        n, m, q = 12, 3, 1
        assert scaled - base == pytest.approx(-q * (n - m) * math.log(s),
                                              rel=1e-9)


class TestEstimateLambda:
    def _gp_draw(self, lam_true, n, seed, q=2):
        rng = np.random.default_rng(seed)
        design = rng.uniform(size=(n, len(lam_true)))
        cov = em.correlation(design, design, lam_true)
        cov[np.diag_indices_from(cov)] += 1e-10
        chol = np.linalg.cholesky(cov)
        outputs = chol @ rng.normal(size=(n, q))
        return design, outputs

    def test_recovers_known_precisions_within_factor_three(self):
        lam_true = np.array([8.0, 0.5])
        design, outputs = self._gp_draw(lam_true, n=40, seed=101)
        lam_hat = em.estimate_lambda_mpe(design, outputs,
                                         rng=np.random.default_rng(7))
        ratio = lam_hat / lam_true
        assert np.all(ratio >= 1.0 / 3.0)
        assert np.all(ratio <= 3.0)

    def test_beats_random_draws(self):
        lam_true = np.array([10.0, 1.0])
        design, outputs = self._gp_draw(lam_true, n=30, seed=55)
        lam_hat = em.estimate_lambda_mpe(design, outputs,
                                         rng=np.random.default_rng(1))
        best = em.lambda_log_posterior(design, outputs, lam_hat)
        draw_rng = np.random.default_rng(99)
        lo, hi = em.LAMBDA_LOG_BOUNDS
        for _ in range(100):
            lam = np.exp(draw_rng.uniform(lo, hi, size=2))
            assert em.lambda_log_posterior(design, outputs, lam) <= best

    def test_same_seed_reproduces_identical_estimate(self):
        lam_true = np.array([5.0])
        design, outputs = self._gp_draw(lam_true, n=20, seed=3, q=1)
        first = em.estimate_lambda_mpe(design, outputs,
                                       rng=np.random.default_rng(42))
        second = em.estimate_lambda_mpe(design, outputs,
                                        rng=np.random.default_rng(42))
        assert np.array_equal(first, second)


class TestPredict:
    def test_design_points_reproduce_outputs(self):
        rng = np.random.default_rng(30)
        design = rng.uniform(size=(15, 3))
        outputs = rng.normal(size=(15, 4))
        fit = em.fit_gls(design, outputs, np.array([2.0, 8.0, 1.0]))
        mean, cvar = fit.predict(design)
        assert np.max(np.abs(mean - outputs)) <= DESIGN_REPRO_TOL
        assert np.max(cvar) <= DESIGN_REPRO_TOL

    def test_three_point_line_matches_dense_formula(self):
        design = np.array([[0.1], [0.5], [0.9]])
        outputs = np.array([[1.0], [0.2], [-0.4]])
        lam = np.array([4.0])
        fit = em.fit_gls(design, outputs, lam)
        probes = np.array([[0.25], [0.66], [0.05]])
        mean, cvar = fit.predict(probes)
        mean_o, cvar_o = dense_predict(design, outputs, lam, probes)
        assert np.max(np.abs(mean - mean_o)) <= DENSE_PREDICT_TOL
        assert np.max(np.abs(cvar - cvar_o)) <= DENSE_PREDICT_TOL

    def test_far_from_design_returns_regression_and_full_scale(self):
        rng = np.random.default_rng(31)
        design = rng.uniform(low=0.0, high=0.2, size=(8, 2))
        outputs = rng.normal(size=(8, 1))
        lam = np.array([400.0, 400.0])
        fit = em.fit_gls(design, outputs, lam)
        probe = np.array([[0.95, 0.95]])
        assert em.correlation(probe, design, lam).max() < 1e-12
        mean, cvar = fit.predict(probe)
        regression = em.regressors(probe) @ fit.beta
        assert mean[0, 0] == pytest.approx(regression[0, 0], abs=1e-10)
        assert cvar[0] >= 1.0

    def test_permuting_design_rows_changes_nothing(self):
        rng = np.random.default_rng(32)
        design = rng.uniform(size=(12, 2))
        outputs = rng.normal(size=(12, 2))
        lam = np.array([3.0, 1.0])
        perm = rng.permutation(12)
        probes = rng.uniform(size=(5, 2))
        base = em.fit_gls(design, outputs, lam).predict(probes)
        shuffled = em.fit_gls(design[perm], outputs[perm], lam).predict(probes)
        assert np.max(np.abs(base[0] - shuffled[0])) <= ORACLE_TOL
        assert np.max(np.abs(base[1] - shuffled[1])) <= ORACLE_TOL

    def test_extrapolation_warns(self):
        rng = np.random.default_rng(33)
        design = rng.uniform(size=(8, 2))
        fit = em.fit_gls(design, rng.normal(size=(8, 1)),
                         np.array([1.0, 1.0]))
        with pytest.warns(UserWarning):
            fit.predict(np.array([[1.4, 0.5]]))


class TestSelectNextDesign:
    def test_existing_design_point_is_never_chosen(self):
        rng = np.random.default_rng(40)
        design = rng.uniform(size=(10, 2))
        outputs = rng.normal(size=(10, 1))
        fit = em.fit_gls(design, outputs, np.array([5.0, 5.0]))
        pool = np.vstack([design[4], rng.uniform(size=(63, 2))])
        idx, score = em.select_next_design([fit], pool)
        assert idx != 0
        assert score > 0.0

    def test_added_point_is_covered_after_refit(self):
        rng = np.random.default_rng(41)
        design = rng.uniform(size=(10, 2))
        outputs = rng.normal(size=(10, 1))
        lam = np.array([5.0, 5.0])
        fit = em.fit_gls(design, outputs, lam)
        pool = rng.uniform(size=(128, 2))
        idx, _ = em.select_next_design([fit], pool)
        grown = np.vstack([design, pool[idx]])
        grown_out = np.vstack([outputs, [[0.3]]])
        refit = em.fit_gls(grown, grown_out, lam)
        _, cvar = refit.predict(pool[idx][None, :])
        assert cvar[0] <= DESIGN_REPRO_TOL

    def test_one_dimensional_gap_is_found(self):
        design = np.array([[0.0], [0.2], [1.0]])
        outputs = np.array([[0.1], [0.5], [0.2]])
        lam = np.array([30.0])
        fit = em.fit_gls(design, outputs, lam)
        grid = np.linspace(0.0, 1.0, 2001)[:, None]
        idx, _ = em.select_next_design([fit], grid)
        _, cvar = fit.predict(grid)
        assert idx == int(np.argmax(cvar))
        assert 0.2 < grid[idx, 0] < 1.0


def _synthetic_emulator(seed=0, n=14):
    """Emulator trained on a smooth closed-form response for testing."""
    rng = np.random.default_rng(seed)
    d = 4
    design = rng.uniform(size=(n, d))

    def response(theta, t):
        level = 0.5 + theta[0] + 0.3 * theta[1] * theta[2] + 0.2 * theta[3]
        return level * (1.0 - np.exp(-np.asarray(t) / 6.0))

    s1 = np.array([response(row, em.KNOTS_STAGE1) for row in design])
    s2 = np.array([response(row, em.KNOTS_STAGE2) for row in design])
    lam = np.full(d, 2.0)
    model = em.build_zone_emulator(2, 1, 3, design, lam, s1, s2)
    return model, response, design


class TestReconstruction:
    def test_knot_exactness(self):
        model, response, design = _synthetic_emulator()
        theta = np.full(4, 0.37)
        knot_means, _, _ = model.knot_predictions(theta)
        all_knots = np.concatenate([model.stage1.knots, model.stage2.knots])
        mu, nu = em.reconstruct_transient(model, theta, all_knots)
        assert np.max(np.abs(mu - knot_means[0])) <= DESIGN_REPRO_TOL
        assert np.max(nu) <= DESIGN_REPRO_TOL * max(
            model.stage1.sigmas.max(), model.stage2.sigmas.max()) ** 2 + 1e-16

    def test_midpoint_of_equal_knots_returns_that_level(self):
        knots = np.array([6.0, 10.0, 14.0, 18.0, 22.0])
        sig = np.array([0.5, 1.5, 1.0, 2.0, 0.7])
        mean, _ = em.reconstruct_series(
            np.array([8.0, 12.0, 16.0]), knots,
            np.full(5, 4.2), sig, lengthscale=8.0)
        assert np.max(np.abs(mean - 4.2)) <= 1e-6

    def test_variance_never_negative(self):
        model, _, _ = _synthetic_emulator()
        rng = np.random.default_rng(77)
        for _ in range(1000):
            theta = rng.uniform(size=4)
            t = rng.uniform(1.0, model.t_max)
            _, nu = em.reconstruct_transient(model, theta, np.array([t]))
            assert nu[0] >= 0.0

    def test_window_boundaries_raise(self):
        model, _, _ = _synthetic_emulator()
        theta = np.full(4, 0.5)
        with pytest.raises(OutOfRange):
            em.reconstruct_transient(model, theta, np.array([0.5]))
        with pytest.raises(OutOfRange):
            em.reconstruct_transient(model, theta, np.array([26.0 + 1e-6]))
        mu, _ = em.reconstruct_transient(model, theta, np.array([26.0]))
        assert np.isfinite(mu[0])

    def test_series_policy_before_activation_and_ramp(self):
        model, _, _ = _synthetic_emulator()
        theta = np.full(4, 0.5)
        mean, var = model.predict_series(theta, np.array([-3.0, 0.0, 0.5, 1.0]))
        assert mean[0] == 0.0 and mean[1] == 0.0
        assert var[0] == 0.0
        assert mean[2] == pytest.approx(0.5 * mean[3], rel=1e-9)

    def test_series_tail_clamps_to_last_knot(self):
        model, _, _ = _synthetic_emulator()
        theta = np.full(4, 0.5)
        mean, _ = model.predict_series(theta, np.array([22.0, 24.0, 26.0]))
        assert mean[1] == pytest.approx(mean[0], rel=1e-9)
        assert mean[2] == pytest.approx(mean[0], rel=1e-9)

    def test_reconstruction_tracks_the_smooth_truth(self):
        model, response, _ = _synthetic_emulator(n=24)
        theta = np.array([0.41, 0.52, 0.63, 0.24])
        t = np.array([2.5, 7.0, 12.5, 20.0])
        mean, _ = model.predict_series(theta, t)
        truth = response(theta, t)
        assert np.max(np.abs(mean - truth)) <= 0.05 * truth.max()


class TestStandardization:
    def test_constant_output_column_survives(self):
        rng = np.random.default_rng(50)
        design = rng.uniform(size=(10, 2))
        outputs = np.hstack([np.full((10, 1), 3.3),
                             rng.normal(size=(10, 1))])
        pack = em.fit_stage(design, (1.0, 2.0), outputs, np.array([1.0, 1.0]))
        mean, _ = pack.predict_knots(rng.uniform(size=(1, 2)))
        assert mean[0, 0] == pytest.approx(3.3, abs=1e-9)

    def test_all_zero_stage_gets_unit_sigmas(self):
        rng = np.random.default_rng(51)
        design = rng.uniform(size=(8, 2))
        pack = em.fit_stage(design, (1.0, 2.0), np.zeros((8, 2)),
                            np.array([1.0, 1.0]))
        assert np.array_equal(pack.sigmas, np.ones(2))


class TestPersistence:
    def test_round_trip_is_bitwise(self, tmp_path):
        model, _, _ = _synthetic_emulator()
        em.save_zone_emulator(tmp_path, model)
        loaded = em.load_zone_emulator(tmp_path, 2, 1, 3)
        rng = np.random.default_rng(60)
        probes = rng.uniform(size=(20, 4))
        t = np.linspace(1.0, 24.0, 40)
        for theta in probes[:5]:
            a_mean, a_var = model.predict_series(theta, t)
            b_mean, b_var = loaded.predict_series(theta, t)
            assert np.array_equal(a_mean, b_mean)
            assert np.array_equal(a_var, b_var)

    def test_missing_archive_names_the_fix(self, tmp_path):
        with pytest.raises(MissingArtifact) as err:
            em.load_zone_emulator(tmp_path, 1, 2, 3)
        assert err.value.hint is not None

    def test_manifest_round_trip(self, tmp_path):
        manifest = {"design_points": 30, "seed": 7}
        em.write_manifest(tmp_path, manifest)
        assert em.read_manifest(tmp_path) == manifest
        with pytest.raises(MissingArtifact):
            em.read_manifest(tmp_path / "absent")
