"""Scenario specs, replicate streams, and the study runners."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from oslsel.drm_core import ValidationError
from oslsel.em_estimator import EmConfig
from oslsel.sim_harness import (
    REFERENCE_MEANS,
    ScenarioSpec,
    generate_replicate,
    reference_scenario,
    run_figure2,
    run_rate_study,
    run_table1,
)

FAST = EmConfig(n_starts=1, tol=1e-4, seed=0)


def tiny_scenario(**kw):
    defaults = dict(n=150, m=150, m_star=60, replications=2, seed=5)
    defaults.update(kw)
    return reference_scenario(**defaults)


class TestScenarioSpec:
    def test_reference_defaults(self):
        spec = reference_scenario()
        np.testing.assert_array_equal(spec.means, REFERENCE_MEANS)
        np.testing.assert_allclose(spec.pi, [0.2, 0.2, 0.4])
        assert spec.k_known == 3 and spec.d == 6
        assert (spec.n, spec.m, spec.m_star) == (1200, 1200, 1200)
        np.testing.assert_array_equal(spec.train_counts(), [400, 400, 400])

    def test_novel_weight_override(self):
        spec = reference_scenario(pi3=0.6)
        np.testing.assert_allclose(spec.pi, [0.2, 0.2, 0.6])

    def test_baseline_fraction_override(self):
        spec = reference_scenario(n0_fraction=0.5)
        np.testing.assert_array_equal(spec.train_counts(), [600, 300, 300])

    def test_remainder_goes_to_largest_residuals(self):
        spec = reference_scenario(n=10)
        counts = spec.train_counts()
        assert counts.sum() == 10
        assert counts.max() - counts.min() <= 1

    def test_validation(self):
        with pytest.raises(ValidationError):
            reference_scenario(pi3=0.7)  # 0.2 + 0.2 + 0.7 > 1
        with pytest.raises(ValidationError):
            ScenarioSpec(
                means=np.zeros((2, 1)), pi=np.array([0.5]), n=10, m=10, m_star=0,
                train_fractions=np.array([0.6, 0.6]),
            )

    def test_true_theta_closed_form(self):
        th = reference_scenario().true_theta()
        np.testing.assert_allclose(th.beta, REFERENCE_MEANS[1:] - REFERENCE_MEANS[0])
        np.testing.assert_allclose(th.alpha, [-3.0, -5.0, -1.5])

    def test_true_theta_matches_density_ratios(self):
        spec = reference_scenario()
        th = spec.true_theta()
        rng = np.random.default_rng(0)
        x = rng.normal(0, 2, (3, 6))
        for k in range(1, 4):
            want = multivariate_normal(spec.means[k], np.eye(6)).logpdf(x) - (
                multivariate_normal(spec.means[0], np.eye(6)).logpdf(x)
            )
            got = th.alpha[k - 1] + x @ th.beta[k - 1]
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_true_theta_with_shared_covariance(self):
        rng = np.random.default_rng(1)
        a = rng.normal(0, 1, (3, 3))
        cov = a @ a.T + 3 * np.eye(3)
        chol = np.linalg.cholesky(cov)
        means = np.vstack([np.zeros(3), np.array([1.0, -1.0, 0.5])])
        spec = ScenarioSpec(
            means=means, pi=np.array([0.3]), n=20, m=20, m_star=0,
            train_fractions=np.array([1.0]), chol=chol,
        )
        th = spec.true_theta()
        x = rng.normal(0, 1, (4, 3))
        want = multivariate_normal(means[1], cov).logpdf(x) - multivariate_normal(
            means[0], cov
        ).logpdf(x)
        np.testing.assert_allclose(th.alpha[0] + x @ th.beta[0], want, atol=1e-10)


class TestGenerateReplicate:
    def test_streams_replay_exactly(self):
        spec = tiny_scenario()
        a_ds, (a_vx, a_vy), a_th = generate_replicate(spec, 1)
        b_ds, (b_vx, b_vy), b_th = generate_replicate(spec, 1)
        np.testing.assert_array_equal(a_ds.train_x, b_ds.train_x)
        np.testing.assert_array_equal(a_ds.test_x, b_ds.test_x)
        np.testing.assert_array_equal(a_vx, b_vx)
        np.testing.assert_array_equal(a_vy, b_vy)
        np.testing.assert_array_equal(a_th.gamma, b_th.gamma)

    def test_replicates_differ(self):
        spec = tiny_scenario()
        a_ds, _, _ = generate_replicate(spec, 1)
        b_ds, _, _ = generate_replicate(spec, 2)
        assert not np.array_equal(a_ds.train_x, b_ds.train_x)

    def test_block_sizes_and_label_order(self):
        spec = tiny_scenario(n=100, m=77, m_star=31)
        ds, (vx, vy), _ = generate_replicate(spec, 0)
        assert ds.m == 77 and vx.shape == (31, 6) and vy.shape == (31,)
        np.testing.assert_array_equal(ds.class_counts, spec.train_counts())
        assert np.all(np.diff(ds.train_y) >= 0)  # classes drawn in order

    def test_validation_mix_obeys_the_law_of_large_numbers(self):
        spec = tiny_scenario(n=30, m=0, m_star=40000)
        _, (_, vy), _ = generate_replicate(spec, 0)
        freqs = np.bincount(vy, minlength=4) / len(vy)
        np.testing.assert_allclose(freqs, [0.2, 0.2, 0.2, 0.4], atol=0.012)


class TestRunners:
    def test_estimation_table_is_reproducible(self):
        spec = tiny_scenario()
        a = run_table1(spec, config=FAST)
        b = run_table1(spec, config=FAST)
        assert a.to_csv_text("tiny") == b.to_csv_text("tiny")
        np.testing.assert_array_equal(a.pi_samples, b.pi_samples)

    def test_estimation_table_fields(self):
        table = run_table1(tiny_scenario(), config=FAST)
        assert table.components == ["pi_1", "pi_2", "pi_3"]
        assert table.n_effective == 2 and table.n_failed == 0
        assert table.pi_samples.shape == (2, 3)
        assert table.r_at_truth.shape == (2, 3)
        assert table.min_r >= -1e-8
        assert np.all(np.isfinite(table.rb)) and np.all(table.rmse > 0)
        assert len(table.to_csv_text("s").strip().split("\n")) == 4

    def test_accuracy_curve_structure(self):
        curve = run_figure2(
            tiny_scenario(m_star=120), np.array([0.3, 0.5]), replications=2, config=FAST
        )
        assert curve.methods == ["fitted", "known_pi", "misspec_pi"]
        assert curve.accuracy.shape == (2, 3)
        assert np.all((curve.accuracy >= 0) & (curve.accuracy <= 1))
        assert np.all(curve.n_effective == 2)
        assert curve.n_failed == 0

    def test_rate_study_structure(self):
        study = run_rate_study(
            tiny_scenario(), totals=(200, 400), replications=2, config=FAST
        )
        np.testing.assert_array_equal(study.totals, [200, 400])
        assert np.all(study.mean_distance > 0)
        assert np.isfinite(study.slope)
        assert "n_total" in study.to_csv_text("rate")
