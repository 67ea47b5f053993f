import dataclasses
import math

import numpy as np
import pytest

import drlab
from drlab.data import Dataset, Observation, from_rows
from drlab.moments import (
    PositivityError,
    du_dpsi_rows,
    du_dtheta_rows,
    make_moment,
    rescaled,
    u_rows,
)

from oracles import IPW_DTHETA_TRUTH


def obs(x1, a, y):
    return Observation(x=np.array([1.0, x1]), a=a, y=y)


class TestScalarExamples:
    def test_aipw_treated_unit(self):
        # e = 0.5 via theta1 = 0, m = 1 via theta2 = (1, 0)
        u = drlab.aipw_moment(0.0, np.zeros(2), np.array([1.0, 0.0]), obs(0.3, 1, 2.0))
        assert u == pytest.approx(2.0 / 0.5 - 1.0 - 0.0)

    def test_aipw_untreated_unit_matches_outcome_model(self):
        u = drlab.aipw_moment(1.0, np.zeros(2), np.array([1.0, 0.0]), obs(-0.7, 0, 7.0))
        assert u == pytest.approx(0.0)

    def test_aipw_identity_case_reduces_to_sample_mean(self):
        # theta1 forcing e = 1 for all rows: the augmentation term vanishes
        rng = np.random.default_rng(0)
        rows = [obs(float(rng.normal()), 1, float(rng.normal())) for _ in range(50)]
        data = from_rows(rows)
        moment = make_moment("aipw", 2)
        theta = moment.assemble_theta([50.0, 0.0], [0.3, -0.2])
        report = drlab.solve(moment, theta, data)
        assert report.psi_hat[0] == pytest.approx(data.y.mean(), abs=1e-12)

    def test_ipw_treated(self):
        assert drlab.ipw_moment(0.0, np.zeros(2), obs(1.2, 1, 3.0)) == pytest.approx(6.0)

    def test_ipw_untreated_drops_weight_term(self):
        theta1 = np.array([-math.log(3.0), 0.0])  # e = 0.25
        assert drlab.ipw_moment(2.0, theta1, obs(0.0, 0, 9.0)) == pytest.approx(-2.0)

    def test_or_linear_predictor(self):
        assert drlab.or_moment(0.0, np.array([1.0, 2.0]), obs(0.5, 0, 0.0)) == pytest.approx(2.0)

    def test_or_zero_model(self):
        assert drlab.or_moment(0.0, np.zeros(2), obs(1.0, 1, 5.0)) == 0.0

    def test_or_solves_to_mean_linear_predictor(self):
        rng = np.random.default_rng(1)
        rows = [obs(float(rng.normal()), 1, 0.0) for _ in range(40)]
        data = from_rows(rows)
        moment = make_moment("or", 2)
        theta2 = np.array([0.7, -1.3])
        report = drlab.solve(moment, theta2, data)
        assert report.psi_hat[0] == pytest.approx((data.x @ theta2).mean(), abs=1e-12)


class TestPositivity:
    def test_treated_row_with_tiny_propensity_raises(self):
        with pytest.raises(PositivityError):
            drlab.ipw_moment(0.0, np.array([-20.0, 0.0]), obs(0.0, 1, 1.0))

    def test_control_row_with_propensity_near_one_raises(self):
        with pytest.raises(PositivityError):
            drlab.aipw_moment(0.0, np.array([20.0, 0.0]), np.zeros(2), obs(0.0, 0, 1.0))

    def test_all_treated_at_propensity_one_is_allowed(self):
        # no control rows, so e ~ 1 produces no unusable weight
        assert drlab.aipw_moment(0.0, np.array([50.0, 0.0]), np.zeros(2), obs(0.0, 1, 2.0)) \
            == pytest.approx(2.0)

    def test_vectorized_error_reports_offending_row(self):
        data = from_rows([obs(0.0, 1, 1.0), obs(8.0, 1, 1.0)])
        moment = make_moment("ipw", 2)
        with pytest.raises(PositivityError) as exc_info:
            u_rows(moment, np.zeros(1), np.array([0.0, -4.0]), data)
        assert exc_info.value.row == 1
        assert "row 1" in str(exc_info.value)


class TestDerivatives:
    @pytest.mark.parametrize("name", ["aipw", "ipw", "or", "mean"])
    def test_analytic_matches_finite_differences(self, name):
        from conftest import random_point

        moment = make_moment(name, 2)
        stripped = dataclasses.replace(moment, du_dpsi=None, du_dtheta=None)
        rng = np.random.default_rng(20260809)
        for _ in range(100):
            psi, theta, data = random_point(rng, moment.k)
            exact_p = du_dpsi_rows(moment, psi, theta, data)
            fd_p = du_dpsi_rows(stripped, psi, theta, data)
            np.testing.assert_allclose(fd_p, exact_p, rtol=1e-6, atol=1e-6)
            exact_t = du_dtheta_rows(moment, psi, theta, data)
            fd_t = du_dtheta_rows(stripped, psi, theta, data)
            np.testing.assert_allclose(fd_t, exact_t, rtol=1e-6, atol=1e-6)

    def test_ipw_equals_aipw_with_zero_outcome_model(self):
        from conftest import random_observation

        rng = np.random.default_rng(3)
        aipw = make_moment("aipw", 2)
        ipw = make_moment("ipw", 2)
        for _ in range(50):
            o = random_observation(rng)
            psi = float(rng.uniform(-2, 2))
            theta1 = rng.uniform(-1, 1, size=2)
            assert drlab.aipw_moment(psi, theta1, np.zeros(2), o) == \
                drlab.ipw_moment(psi, theta1, o)
        data = from_rows([random_observation(rng) for _ in range(30)])
        psi = np.array([0.4])
        theta1 = np.array([0.2, -0.5])
        np.testing.assert_array_equal(
            u_rows(aipw, psi, aipw.assemble_theta(theta1, np.zeros(2)), data),
            u_rows(ipw, psi, theta1, data),
        )


class TestDrIdentity:
    """Monte Carlo checks of the double-robustness equations."""

    M = 200_000

    def _mc_mean_u(self, theta1, theta2, default_spec, default_truth, seed):
        moment = make_moment("aipw", 2)
        data = drlab.sample(default_spec, self.M, drlab.substream(seed, "dr-identity"))
        vals = u_rows(moment, np.array([default_truth[0]]),
                      moment.assemble_theta(theta1, theta2), data)[:, 0]
        return vals.mean(), vals.std(ddof=1) / math.sqrt(self.M)

    def test_wrong_outcome_block_keeps_moment_unbiased(self, default_spec, default_truth):
        rng = np.random.default_rng(11)
        _, theta1_star, _ = default_truth
        for i in range(20):
            theta2 = rng.uniform(-0.75, 0.75, size=2)
            mean, se = self._mc_mean_u(theta1_star, theta2, default_spec, default_truth, i)
            assert abs(mean) < 4 * se

    def test_wrong_propensity_block_keeps_moment_unbiased(self, default_spec, default_truth):
        rng = np.random.default_rng(12)
        _, _, theta2_star = default_truth
        for i in range(20):
            theta1 = rng.uniform(-0.75, 0.75, size=2)
            mean, se = self._mc_mean_u(theta1, theta2_star, default_spec, default_truth, 100 + i)
            assert abs(mean) < 4 * se

    def test_oracle_moment_mean_over_replications(self, default_spec, default_truth):
        moment = make_moment("aipw", 2)
        psi_star, theta1_star, theta2_star = default_truth
        theta_star = moment.assemble_theta(theta1_star, theta2_star)
        reps, n = 200, 2000
        means, sds = [], []
        for rep in range(reps):
            data = drlab.sample(default_spec, n, drlab.substream(5, "oracle-moment", rep))
            vals = u_rows(moment, np.array([psi_star]), theta_star, data)[:, 0]
            means.append(vals.mean())
            sds.append(vals.std(ddof=1))
        pooled_sd = float(np.mean(sds))
        assert abs(np.mean(means)) < 4 * pooled_sd / math.sqrt(n * reps)


class TestVerifyDrDerivative:
    def test_aipw_entries_vanish(self, default_spec, default_truth):
        moment = make_moment("aipw", 2)
        psi_star, theta1_star, theta2_star = default_truth
        check = drlab.verify_dr_derivative(
            moment, default_spec, psi_star,
            moment.assemble_theta(theta1_star, theta2_star), 1_000_000,
        )
        assert check.estimate.shape == (1, 4)
        assert check.max_abs_z < 4.0

    def test_ipw_theta1_entry_is_significant(self, default_spec, default_truth):
        moment = make_moment("ipw", 2)
        psi_star, theta1_star, _ = default_truth
        check = drlab.verify_dr_derivative(
            moment, default_spec, psi_star, theta1_star, 1_000_000,
        )
        assert np.max(np.abs(check.z_scores)) > 4.0
        # and the estimates agree with the quadrature values
        np.testing.assert_allclose(
            check.estimate[0], IPW_DTHETA_TRUTH, atol=4 * check.mc_se.max(),
        )

    def test_theta_free_moment_yields_empty_matrix(self, default_spec, default_truth):
        moment = make_moment("mean", 2)
        check = drlab.verify_dr_derivative(
            moment, default_spec, default_truth[0], np.zeros(0), 10_000,
        )
        assert check.estimate.shape == (1, 0)
        assert check.max_abs_z == 0.0

    def test_insufficient_draws_rejected(self, default_spec, default_truth):
        moment = make_moment("aipw", 2)
        with pytest.raises(ValueError, match="at least 1000"):
            drlab.verify_dr_derivative(moment, default_spec, 3.0, np.zeros(4), 999)


class TestTypes:
    def test_split_must_be_disjoint(self):
        with pytest.raises(ValueError, match="overlap"):
            drlab.NuisanceSplit(idx1=(0, 1), idx2=(1, 2))

    def test_split_must_cover_prefix(self):
        with pytest.raises(ValueError, match="cover"):
            drlab.NuisanceSplit(idx1=(0,), idx2=(3,))

    def test_unknown_moment_id(self):
        with pytest.raises(ValueError, match="unknown moment"):
            make_moment("banana", 2)

    def test_assemble_theta_layout(self):
        moment = make_moment("aipw", 2)
        theta = moment.assemble_theta([1.0, 2.0], [3.0, 4.0])
        np.testing.assert_array_equal(theta, [1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(moment.theta1(theta), [1.0, 2.0])
        np.testing.assert_array_equal(moment.theta2(theta), [3.0, 4.0])

    def test_observation_validation(self):
        with pytest.raises(ValueError):
            Observation(x=np.array([0.5, 1.0]), a=1, y=0.0)  # bad intercept
        with pytest.raises(ValueError):
            Observation(x=np.array([1.0]), a=2, y=0.0)
        with pytest.raises(ValueError):
            Observation(x=np.array([1.0]), a=0, y=float("inf"))

    def test_dataset_validation(self):
        with pytest.raises(ValueError, match="0/1"):
            Dataset(x=np.ones((2, 1)), a=np.array([0.0, 0.5]), y=np.zeros(2))
        with pytest.raises(ValueError, match="intercept"):
            Dataset(x=np.full((2, 1), 2.0), a=np.zeros(2), y=np.zeros(2))

    def test_rescaled_moment_values(self):
        moment = make_moment("mean", 2)
        data = from_rows([obs(0.0, 0, 1.0), obs(0.0, 1, 5.0)])
        doubled = rescaled(moment, np.array([[2.0]]))
        np.testing.assert_array_equal(
            u_rows(doubled, np.array([1.0]), np.zeros(0), data),
            2.0 * u_rows(moment, np.array([1.0]), np.zeros(0), data),
        )
