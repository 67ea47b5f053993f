import math

import numpy as np
import pytest
from scipy.special import ndtri

import drlab
from drlab._linalg import SingularMatrixError
from drlab.data import Dataset
from drlab.moments import MomentFunction, NuisanceSplit, make_moment, rescaled
from drlab.sandwich import sandwich_variance, z_quantile
from drlab.zsolver import solve

from oracles import SE_MEAN_123, Z_90, Z_95, Z_99, Z_6827


def mean_data(values):
    n = len(values)
    return Dataset(x=np.ones((n, 1)), a=np.zeros(n), y=np.array(values, dtype=float))


def two_dim_moment():
    """U = (y - psi1, y^2 - psi2): theta-free, affine in psi, d = 2."""
    split = NuisanceSplit(idx1=(), idx2=())

    def u(psi, theta, data):
        return np.column_stack([data.y - psi[0], data.y ** 2 - psi[1]])

    def du_dpsi(psi, theta, data):
        out = np.zeros((data.n, 2, 2))
        out[:, 0, 0] = -1.0
        out[:, 1, 1] = -1.0
        return out

    return MomentFunction(name="mean2", d=2, k=0, split=split,
                          is_doubly_robust=False, u=u, du_dpsi=du_dpsi,
                          use_mean_start=False)


class TestExactArithmetic:
    def test_one_two_three(self):
        data = mean_data([1.0, 2.0, 3.0])
        res = sandwich_variance(make_moment("mean", 1), 2.0, None, data)
        np.testing.assert_allclose(res.bread, [[-1.0]], atol=1e-15)
        assert res.meat[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-15)
        assert res.vhat[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-15)
        assert res.se[0] == pytest.approx(SE_MEAN_123, abs=1e-12)
        assert res.ci_lower[0] < 2.0 < res.ci_upper[0]

    def test_constant_outcome_degenerate_interval(self):
        data = mean_data([5.0, 5.0, 5.0, 5.0])
        res = sandwich_variance(make_moment("mean", 1), 5.0, None, data)
        assert res.meat[0, 0] == 0.0
        assert res.se[0] == 0.0
        assert res.ci_lower[0] == res.ci_upper[0] == 5.0

    def test_se_squared_times_n_equals_sample_variance(self):
        rng = np.random.default_rng(5)
        y = rng.normal(size=101)
        data = mean_data(y)
        psi_hat = float(np.mean(y))
        res = sandwich_variance(make_moment("mean", 1), psi_hat, None, data)
        centered = y - psi_hat
        sample_var = float(centered @ centered / len(y))
        assert res.se[0] ** 2 * len(y) == pytest.approx(sample_var, rel=1e-15)


class TestInvariance:
    def test_scalar_rescaling_exact(self, default_spec, default_truth):
        moment = make_moment("aipw", 2)
        _, theta1_star, theta2_star = default_truth
        theta_star = moment.assemble_theta(theta1_star, theta2_star)
        data = drlab.sample(default_spec, 1000, drlab.substream(30, "sand"))
        psi_hat = solve(moment, theta_star, data).psi_hat
        base = sandwich_variance(moment, psi_hat, theta_star, data)
        for scale in (2.0, -0.5, 64.0):  # powers of two: float-exact rescaling
            res = sandwich_variance(
                rescaled(moment, np.array([[scale]])), psi_hat, theta_star, data)
            np.testing.assert_array_equal(res.vhat, base.vhat)
            np.testing.assert_array_equal(res.se, base.se)
            np.testing.assert_array_equal(res.ci_lower, base.ci_lower)
            np.testing.assert_array_equal(res.ci_upper, base.ci_upper)
            np.testing.assert_allclose(res.bread, scale * base.bread, rtol=1e-15)
            np.testing.assert_allclose(res.meat, scale ** 2 * base.meat, rtol=1e-15)

    def test_matrix_rescaling_two_dim(self):
        rng = np.random.default_rng(6)
        data = mean_data(rng.normal(size=400))
        moment = two_dim_moment()
        psi_hat = solve(moment, None, data).psi_hat
        base = sandwich_variance(moment, psi_hat, None, data)
        m = np.array([[2.0, 1.0], [0.0, 3.0]])
        res = sandwich_variance(rescaled(moment, m), psi_hat, None, data)
        np.testing.assert_allclose(res.vhat, base.vhat, rtol=1e-11)
        np.testing.assert_allclose(res.se, base.se, rtol=1e-11)

    def test_vhat_symmetric_and_psd(self):
        rng = np.random.default_rng(7)
        moment = two_dim_moment()
        for _ in range(20):
            data = mean_data(rng.normal(size=50))
            psi_hat = solve(moment, None, data).psi_hat
            res = sandwich_variance(moment, psi_hat, None, data)
            np.testing.assert_allclose(res.vhat, res.vhat.T, atol=1e-10)
            eigs = np.linalg.eigvalsh(res.vhat)
            assert eigs.min() >= -1e-10 * np.trace(res.vhat)
            assert np.all(res.ci_lower <= psi_hat) and np.all(psi_hat <= res.ci_upper)

    def test_singular_bread_names_identification(self):
        split = NuisanceSplit(idx1=(), idx2=())

        def u(psi, theta, data):
            return (data.y - 1.0)[:, None]  # does not depend on psi

        flat = MomentFunction(name="flat", d=1, k=0, split=split,
                              is_doubly_robust=False, u=u, use_mean_start=False)
        with pytest.raises(SingularMatrixError, match="identified"):
            sandwich_variance(flat, 0.0, None, mean_data([1.0, 2.0]))


class TestZQuantile:
    def test_frozen_table_values(self):
        assert z_quantile(0.95) == pytest.approx(Z_95, abs=1e-9)
        assert z_quantile(0.95) == pytest.approx(1.959964, abs=5e-7)
        assert z_quantile(0.90) == pytest.approx(Z_90, abs=1e-9)
        assert z_quantile(0.99) == pytest.approx(Z_99, abs=1e-9)

    def test_one_sigma_two_sided_level(self):
        assert z_quantile(0.6827) == pytest.approx(Z_6827, abs=1e-9)
        assert z_quantile(0.6827) == pytest.approx(1.0, abs=5e-4)

    def test_level_to_zero_limit_is_median(self):
        assert abs(z_quantile(1e-12)) < 1e-8

    def test_agrees_with_scipy_across_levels(self):
        for level in np.linspace(1e-6, 1 - 1e-6, 2001):
            expected = float(ndtri(0.5 * (1.0 + level)))
            assert z_quantile(float(level)) == pytest.approx(expected, abs=1e-10)

    def test_out_of_range_levels_rejected(self):
        for bad in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(ValueError):
                z_quantile(bad)
        with pytest.raises(ValueError):
            sandwich_variance(make_moment("mean", 1), 0.0, None,
                              mean_data([1.0]), ci_level=1.2)


class TestConsistencyLight:
    """Small-scale sandwich-vs-Monte-Carlo check; the strict 5% version at
    n=8000, R=2000 runs in the acceptance suite."""

    def test_mean_se_tracks_empirical_sd(self, default_spec, default_truth):
        moment = make_moment("aipw", 2)
        _, theta1_star, theta2_star = default_truth
        theta_star = moment.assemble_theta(theta1_star, theta2_star)
        psis, ses = [], []
        for rep in range(400):
            data = drlab.sample(default_spec, 2000, drlab.substream(31, "cons", rep))
            report = solve(moment, theta_star, data)
            sw = sandwich_variance(moment, report.psi_hat, theta_star, data)
            psis.append(report.psi_hat[0])
            ses.append(sw.se[0])
        ratio = np.mean(ses) / np.std(psis, ddof=1)
        assert 0.9 < ratio < 1.1
