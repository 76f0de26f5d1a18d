"""Least-squares machinery checked against hand-computed references."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from examdecomp import regress
from examdecomp.errors import (
    DenominatorNearZero,
    DimensionMismatch,
    NonFiniteInput,
    ParamInvalid,
    RankDeficient,
    SingleCluster,
)

# Fixed 9-row, 3-cluster dataset.  Expected values below were computed
# independently with the explicit textbook formulas (normal equations,
# sigma^2 = e'e/(n-k), meat = sum_g (X_g'e_g)(X_g'e_g)' with the
# G/(G-1)*(N-1)/(N-K) factor) in a throwaway script, then frozen here.
X9 = np.array(
    [
        [1, 0.5], [1, -0.2], [1, 0.3],
        [1, 1.0], [1, -1.5], [1, 0.7],
        [1, 0.1], [1, -0.4], [1, 0.9],
    ],
    dtype=float,
)
Y9 = np.array([2.1, 1.9, 2.3, 2.8, 0.7, 2.5, 2.0, 1.6, 2.9])
G9 = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
W9 = np.array([1, 2, 1, 3, 1, 2, 1, 1, 2], dtype=float)

EXPECTED_B = np.array([1.9580792, 0.84091944])
EXPECTED_SE_HOMO = np.array([0.04756513, 0.06318659])
EXPECTED_SE_CLUSTER = np.array([0.0138585, 0.05295116])
EXPECTED_R2 = 0.9619805927305881
EXPECTED_B_W = np.array([1.97455845, 0.84503785])
EXPECTED_SE_HOMO_W = np.array([0.04782189, 0.06159132])
EXPECTED_SE_CLUSTER_W = np.array([0.01677455, 0.05425069])


def _design(x=X9):
    return regress.DesignMatrix(x, ("const", "x"), intercept_included=True)


class TestOlsAgainstNormalEquations:
    def test_fixed_dataset(self):
        fit = regress.ols_fit(_design(), Y9)
        np.testing.assert_allclose(fit.coefficients, EXPECTED_B, atol=1e-7)
        np.testing.assert_allclose(fit.se_homoskedastic, EXPECTED_SE_HOMO, atol=1e-7)
        assert fit.r_squared == pytest.approx(EXPECTED_R2, abs=1e-12)
        assert fit.n_obs == 9

    def test_weighted_fixed_dataset(self):
        fit = regress.ols_fit(_design(), Y9, weights=W9)
        np.testing.assert_allclose(fit.coefficients, EXPECTED_B_W, atol=1e-7)
        np.testing.assert_allclose(fit.se_homoskedastic, EXPECTED_SE_HOMO_W, atol=1e-7)

    def test_random_design_matches_solve(self):
        rng = np.random.default_rng(7)
        x = np.column_stack([np.ones(60), rng.normal(size=(60, 3))])
        y = rng.normal(size=60)
        d = regress.DesignMatrix(x, ("const", "a", "b", "c"), intercept_included=True)
        fit = regress.ols_fit(d, y)
        direct = np.linalg.solve(x.T @ x, x.T @ y)
        np.testing.assert_allclose(fit.coefficients, direct, atol=1e-10)

    def test_residuals_orthogonal_to_design(self):
        rng = np.random.default_rng(8)
        x = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
        y = rng.normal(size=50)
        w = rng.uniform(0.5, 2.0, size=50)
        d = regress.DesignMatrix(x, ("const", "a", "b"), intercept_included=True)
        fit = regress.ols_fit(d, y, weights=w)
        np.testing.assert_allclose(x.T @ (w * fit.residuals), 0.0, atol=1e-9)

    def test_perfect_fit_r2_one(self):
        d = _design()
        y = X9 @ np.array([1.0, 2.0])
        fit = regress.ols_fit(d, y)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(fit.se_homoskedastic, 0.0, atol=1e-12)


class TestClusterRobust:
    def test_fixed_dataset(self):
        fit = regress.ols_fit(_design(), Y9)
        se = regress.cluster_robust_se(fit, _design(), G9)
        np.testing.assert_allclose(se, EXPECTED_SE_CLUSTER, atol=1e-7)

    def test_weighted_fixed_dataset(self):
        fit = regress.ols_fit(_design(), Y9, weights=W9)
        se = regress.cluster_robust_se(fit, _design(), G9, extra_df=0)
        np.testing.assert_allclose(se, EXPECTED_SE_CLUSTER_W, atol=1e-7)

    def test_singleton_clusters_equal_hc1(self):
        rng = np.random.default_rng(11)
        x = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
        y = rng.normal(size=40)
        d = regress.DesignMatrix(x, ("const", "a", "b"), intercept_included=True)
        fit = regress.ols_fit(d, y)
        cov_cluster = regress.cluster_robust_cov(fit, d, np.arange(40))
        cov_hc1 = regress.hc1_cov(fit, d)
        np.testing.assert_allclose(cov_cluster, cov_hc1, rtol=1e-12)

    def test_string_cluster_ids(self):
        fit = regress.ols_fit(_design(), Y9)
        labels = np.array(["north", "north", "north", "mid", "mid", "mid",
                           "south", "south", "south"], dtype=object)
        se = regress.cluster_robust_se(fit, _design(), labels)
        np.testing.assert_allclose(se, EXPECTED_SE_CLUSTER, atol=1e-7)

    def test_relabeling_clusters_changes_nothing(self):
        # only the partition matters, not the label values
        fit = regress.ols_fit(_design(), Y9)
        base = regress.cluster_robust_se(fit, _design(), G9)
        for relabeled in (97 - G9, (G9 + 5) % 3, np.array(list("bca"))[G9]):
            se = regress.cluster_robust_se(fit, _design(), relabeled)
            np.testing.assert_array_equal(se, base)

    def test_single_cluster_raises(self):
        fit = regress.ols_fit(_design(), Y9)
        with pytest.raises(SingleCluster):
            regress.cluster_robust_cov(fit, _design(), np.zeros(9))

    def test_extra_df_scales_covariance(self):
        fit = regress.ols_fit(_design(), Y9)
        base = regress.cluster_robust_cov(fit, _design(), G9)
        wider = regress.cluster_robust_cov(fit, _design(), G9, extra_df=3)
        np.testing.assert_allclose(wider, base * (9 - 2) / (9 - 2 - 3), rtol=1e-12)


class TestFixedEffectAbsorption:
    def test_matches_explicit_dummies(self):
        rng = np.random.default_rng(21)
        n = 120
        groups = rng.integers(0, 6, size=n)
        x = rng.normal(size=n)
        y = 0.7 * x + 0.3 * groups + rng.normal(size=n) * 0.4
        w = rng.uniform(0.5, 3.0, size=n)

        slim = regress.DesignMatrix(x.reshape(-1, 1), ("x",), intercept_included=False)
        xd, yd = regress.absorb_fixed_effects(slim, y, groups, weights=w)
        fit_within = regress.ols_fit(xd, yd, weights=w)

        dummies = {f"g{k}": (groups == k).astype(float) for k in range(6)}
        full = regress.design_from_columns({"x": x, **dummies}, add_intercept=False)
        fit_full = regress.ols_fit(full, y, weights=w)

        assert fit_within.coefficient("x") == pytest.approx(
            fit_full.coefficient("x"), abs=1e-10
        )
        # cluster SEs agree once the absorbed parameters enter the df count
        se_within = regress.cluster_robust_se(fit_within, xd, groups, extra_df=6 - 0)
        cov_full = regress.cluster_robust_cov(fit_full, full, groups)
        # note: identical df only when the dummy fit counts them directly
        n_, k_full = n, 7
        factor_full = (n_ - 1) / (n_ - k_full)
        factor_within = (n_ - 1) / (n_ - 1 - 6)
        np.testing.assert_allclose(
            se_within[0] ** 2 / factor_within,
            cov_full[0, 0] / factor_full,
            rtol=1e-10,
        )

    def test_demeaning_removes_group_means(self):
        rng = np.random.default_rng(22)
        groups = np.repeat(np.arange(5), 8)
        x = rng.normal(size=40)
        d = regress.DesignMatrix(x.reshape(-1, 1), ("x",), intercept_included=False)
        xd, yd = regress.absorb_fixed_effects(d, rng.normal(size=40), groups)
        for k in range(5):
            assert abs(xd.values[groups == k, 0].mean()) < 1e-12
            assert abs(yd[groups == k].mean()) < 1e-12


class TestTwoStageLeastSquares:
    def test_instrumenting_with_itself_is_ols(self):
        rng = np.random.default_rng(31)
        n = 80
        x = rng.normal(size=n)
        y = 1.5 * x + rng.normal(size=n)
        endog = regress.DesignMatrix(x.reshape(-1, 1), ("x",), intercept_included=False)
        exog = regress.DesignMatrix(np.ones((n, 1)), ("const",), intercept_included=True)
        z = regress.DesignMatrix(x.reshape(-1, 1), ("zx",), intercept_included=False)
        iv = regress.tsls_fit(y, endog, exog, z)
        ols = regress.ols_fit(
            regress.design_from_columns({"x": x}, add_intercept=True), y
        )
        assert iv.coefficient("x") == pytest.approx(ols.coefficient("x"), abs=1e-10)

    def test_just_identified_equals_wald_ratio(self):
        # frozen from the same seed with the covariance-ratio formula
        rng = np.random.default_rng(414)
        n = 40
        z = rng.normal(size=n)
        x = 0.8 * z + rng.normal(size=n) * 0.5
        y = 1.7 * x + rng.normal(size=n) * 0.3
        endog = regress.DesignMatrix(x.reshape(-1, 1), ("x",), intercept_included=False)
        exog = regress.DesignMatrix(np.ones((n, 1)), ("const",), intercept_included=True)
        zd = regress.DesignMatrix(z.reshape(-1, 1), ("z",), intercept_included=False)
        iv = regress.tsls_fit(y, endog, exog, zd)
        assert iv.coefficient("x") == pytest.approx(1.7577278578434872, abs=1e-10)
        assert iv.first_stage_f["x"] > 10

    def test_iv_removes_attenuation(self):
        rng = np.random.default_rng(32)
        n = 50_000
        latent = rng.normal(size=n)
        x_obs = latent + rng.normal(size=n) * 1.0  # reliability 0.5
        z = latent + rng.normal(size=n) * 1.0  # independent noise
        y = 0.8 * latent + rng.normal(size=n) * 0.5
        exog = regress.DesignMatrix(np.ones((n, 1)), ("const",), intercept_included=True)
        ols = regress.ols_fit(
            regress.design_from_columns({"x": x_obs}), y
        )
        iv = regress.tsls_fit(
            y,
            regress.DesignMatrix(x_obs.reshape(-1, 1), ("x",), intercept_included=False),
            exog,
            regress.DesignMatrix(z.reshape(-1, 1), ("z",), intercept_included=False),
        )
        assert ols.coefficient("x") == pytest.approx(0.4, abs=0.02)
        assert iv.coefficient("x") == pytest.approx(0.8, abs=0.03)


class TestDeltaRatio:
    def test_hand_gradient(self):
        fit = regress.FitResult(
            coefficients=np.array([0.054, 0.154]),
            residuals=np.zeros(10),
            se_homoskedastic=np.array([0.02, 0.017]),
            r_squared=0.5,
            n_obs=10,
            column_labels=("endurance", "ability"),
            cov_homoskedastic=np.eye(2),
            xtx_inv=np.eye(2),
        )
        cov = np.array([[0.0004, 0.00005], [0.00005, 0.0003]])
        ratio = regress.delta_ratio(fit, "endurance", "ability", cov)
        assert ratio.value == pytest.approx(0.35064935064935066, abs=1e-12)
        assert ratio.se == pytest.approx(0.13016550097200025, abs=1e-12)

    def test_matches_parametric_bootstrap(self):
        b = np.array([0.6, 1.5])
        cov = np.array([[0.01, 0.002], [0.002, 0.02]])
        fit = regress.FitResult(
            coefficients=b,
            residuals=np.zeros(4),
            se_homoskedastic=np.sqrt(np.diag(cov)),
            r_squared=0.0,
            n_obs=4,
            column_labels=("num", "den"),
            cov_homoskedastic=cov,
            xtx_inv=np.eye(2),
        )
        ratio = regress.delta_ratio(fit, "num", "den", cov)
        rng = np.random.default_rng(99)
        draws = rng.multivariate_normal(b, cov, size=200_000)
        boot = draws[:, 0] / draws[:, 1]
        assert ratio.se == pytest.approx(boot.std(), rel=0.02)

    def test_near_zero_denominator_raises(self):
        fit = regress.FitResult(
            coefficients=np.array([1.0, 1e-13]),
            residuals=np.zeros(4),
            se_homoskedastic=np.ones(2),
            r_squared=0.0,
            n_obs=4,
            column_labels=("num", "den"),
            cov_homoskedastic=np.eye(2),
            xtx_inv=np.eye(2),
        )
        with pytest.raises(DenominatorNearZero):
            regress.delta_ratio(fit, "num", "den", np.eye(2))


class TestValidation:
    def test_collinear_design_raises(self):
        x = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
        d = regress.DesignMatrix(x, ("const", "a", "a2"), intercept_included=True)
        with pytest.raises(RankDeficient):
            regress.ols_fit(d, np.arange(10.0))

    def test_nan_in_design_raises(self):
        x = X9.copy()
        x[3, 1] = np.nan
        with pytest.raises(NonFiniteInput):
            regress.DesignMatrix(x, ("const", "x"), intercept_included=True)

    def test_wrong_y_length(self):
        with pytest.raises(DimensionMismatch):
            regress.ols_fit(_design(), Y9[:5])

    def test_negative_weights(self):
        with pytest.raises(ParamInvalid):
            regress.ols_fit(_design(), Y9, weights=-W9)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_unit_weights_match_unweighted(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(10, 40)
    x = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    y = rng.normal(size=n)
    d = regress.DesignMatrix(x, ("const", "a", "b"), intercept_included=True)
    plain = regress.ols_fit(d, y)
    weighted = regress.ols_fit(d, y, weights=np.ones(n))
    np.testing.assert_allclose(plain.coefficients, weighted.coefficients, atol=1e-12)
    np.testing.assert_allclose(
        plain.se_homoskedastic, weighted.se_homoskedastic, atol=1e-12
    )


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_row_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = 30
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.normal(size=n)
    g = rng.integers(0, 5, size=n)
    perm = rng.permutation(n)
    d1 = regress.DesignMatrix(x, ("const", "x"), intercept_included=True)
    d2 = regress.DesignMatrix(x[perm], ("const", "x"), intercept_included=True)
    f1 = regress.ols_fit(d1, y)
    f2 = regress.ols_fit(d2, y[perm])
    np.testing.assert_allclose(f1.coefficients, f2.coefficients, atol=1e-10)
    if np.unique(g).shape[0] >= 2:
        se1 = regress.cluster_robust_se(f1, d1, g)
        se2 = regress.cluster_robust_se(f2, d2, g[perm])
        np.testing.assert_allclose(se1, se2, atol=1e-10)
