"""Dense linear-model engine.

Implements the small set of estimators the rest of the package needs:

* ordinary and weighted least squares via a pivoted QR factorisation
  (no explicit normal equations),
* one absorbed fixed effect through within-group demeaning,
* cluster-robust (CR1) and heteroskedasticity-robust (HC1) covariance,
* two-stage least squares with conventional second-stage standard errors,
* the delta method for a ratio of two coefficients.

All functions are pure: inputs are never mutated and no global state is
read or written, so calls are safe to run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DenominatorNearZero,
    DimensionMismatch,
    NonFiniteInput,
    ParamInvalid,
    RankDeficient,
    SingleCluster,
    UnderIdentified,
)

# Relative pivot tolerance for declaring a design matrix rank deficient.
RANK_TOL = 1e-10


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionMismatch(f"design values must be 2-D, got ndim={arr.ndim}")
    return arr


@dataclass(frozen=True)
class DesignMatrix:
    """A labelled, validated regressor matrix.

    Parameters
    ----------
    values : ndarray, shape (n, k)
        Regressor columns, n >= k, all entries finite.
    column_labels : tuple of str
        One unique label per column.
    intercept_included : bool
        Whether one of the columns is a constant term.  Controls whether
        R-squared is centered.
    """

    values: np.ndarray
    column_labels: tuple[str, ...]
    intercept_included: bool = False

    def __post_init__(self):
        arr = _as_matrix(self.values)
        object.__setattr__(self, "values", arr)
        labels = tuple(str(c) for c in self.column_labels)
        object.__setattr__(self, "column_labels", labels)
        if len(labels) != arr.shape[1]:
            raise DimensionMismatch(
                f"{len(labels)} labels for {arr.shape[1]} columns"
            )
        if len(set(labels)) != len(labels):
            raise DimensionMismatch(f"duplicate column labels: {labels}")
        if arr.shape[0] < arr.shape[1]:
            raise DimensionMismatch(
                f"need at least as many rows as columns, got {arr.shape}"
            )
        if not np.isfinite(arr).all():
            raise NonFiniteInput("design matrix contains NaN or infinity")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def column_index(self, label: str) -> int:
        try:
            return self.column_labels.index(label)
        except ValueError:
            raise DimensionMismatch(
                f"no column labelled {label!r}; have {self.column_labels}"
            ) from None

    def column(self, label: str) -> np.ndarray:
        return self.values[:, self.column_index(label)]


def design_from_columns(
    columns: dict[str, np.ndarray], add_intercept: bool = True
) -> DesignMatrix:
    """Stack named 1-D arrays into a DesignMatrix, optionally prepending a constant."""
    if not columns and not add_intercept:
        raise DimensionMismatch("no columns given")
    arrays = {k: np.asarray(v, dtype=float).ravel() for k, v in columns.items()}
    lengths = {a.shape[0] for a in arrays.values()}
    if len(lengths) > 1:
        raise DimensionMismatch(f"column lengths differ: {sorted(lengths)}")
    n = lengths.pop() if lengths else 0
    labels: list[str] = []
    cols: list[np.ndarray] = []
    if add_intercept:
        if n == 0:
            raise DimensionMismatch("cannot infer row count for intercept-only design")
        labels.append("const")
        cols.append(np.ones(n))
    for name, arr in arrays.items():
        labels.append(name)
        cols.append(arr)
    return DesignMatrix(
        np.column_stack(cols), tuple(labels), intercept_included=add_intercept
    )


@dataclass
class FitResult:
    """Output of a least-squares fit.

    ``residuals`` are on the original (unweighted) scale; invariants such
    as orthogonality to the regressors hold in the weighted inner product
    when weights were supplied.
    """

    coefficients: np.ndarray
    residuals: np.ndarray
    se_homoskedastic: np.ndarray
    r_squared: float
    n_obs: int
    column_labels: tuple[str, ...]
    cov_homoskedastic: np.ndarray
    weights: np.ndarray | None = None
    se_cluster: np.ndarray | None = None
    n_clusters: int | None = None
    first_stage_f: dict[str, float] | None = None
    xtx_inv: np.ndarray = field(repr=False, default=None)

    def coefficient(self, label: str) -> float:
        return float(self.coefficients[self.column_labels.index(label)])

    def se(self, label: str) -> float:
        """Cluster-robust standard error if computed, else homoskedastic."""
        idx = self.column_labels.index(label)
        if self.se_cluster is not None:
            return float(self.se_cluster[idx])
        return float(self.se_homoskedastic[idx])


@dataclass(frozen=True)
class RatioEstimate:
    """A ratio of two coefficients with a delta-method standard error."""

    value: float
    se: float
    numerator_label: str
    denominator_label: str


def _check_weights(weights, n: int, k: int) -> np.ndarray | None:
    if weights is None:
        return None
    w = np.asarray(weights, dtype=float).ravel()
    if w.shape[0] != n:
        raise DimensionMismatch(f"{w.shape[0]} weights for {n} rows")
    if not np.isfinite(w).all():
        raise NonFiniteInput("weights contain NaN or infinity")
    if (w < 0).any():
        raise ParamInvalid("weights must be non-negative")
    if int((w > 0).sum()) < k:
        raise DimensionMismatch(
            f"need at least {k} strictly positive weights, got {int((w > 0).sum())}"
        )
    return w


def _qr_solve(Xw: np.ndarray, yw: np.ndarray):
    """Least squares through a column-pivoted QR; returns (beta, xtx_inv).

    Raises RankDeficient when a pivot falls below RANK_TOL relative to the
    largest pivot.
    """
    q, r, piv = scipy.linalg.qr(Xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0 or (diag < RANK_TOL * diag[0]).any():
        raise RankDeficient(
            "design matrix is rank deficient at relative tolerance "
            f"{RANK_TOL:g} (pivots {diag.tolist()})"
        )
    beta_piv = scipy.linalg.solve_triangular(r, q.T @ yw)
    beta = np.empty_like(beta_piv)
    beta[piv] = beta_piv
    # (X'X)^-1 = P R^-1 R^-T P' computed without forming X'X.
    r_inv = scipy.linalg.solve_triangular(r, np.eye(r.shape[0]))
    xtx_inv_piv = r_inv @ r_inv.T
    inv = np.empty_like(xtx_inv_piv)
    inv[np.ix_(piv, piv)] = xtx_inv_piv
    return beta, inv


def ols_fit(X: DesignMatrix, y, weights=None) -> FitResult:
    """Least squares of ``y`` on the columns of ``X``.

    With ``weights`` the criterion is sum_i w_i * (y_i - x_i'b)^2; weights
    must be non-negative with at least as many positive entries as columns.
    R-squared is centered when the design declares an intercept, uncentered
    otherwise.
    """
    yv = np.asarray(y, dtype=float).ravel()
    n, k = X.values.shape
    if yv.shape[0] != n:
        raise DimensionMismatch(f"{yv.shape[0]} responses for {n} design rows")
    if not np.isfinite(yv).all():
        raise NonFiniteInput("response vector contains NaN or infinity")
    w = _check_weights(weights, n, k)

    if w is None:
        Xw, yw = X.values, yv
    else:
        sw = np.sqrt(w)
        Xw = X.values * sw[:, None]
        yw = yv * sw

    beta, xtx_inv = _qr_solve(Xw, yw)
    resid = yv - X.values @ beta

    wv = np.ones(n) if w is None else w
    ssr = float(wv @ (resid**2))
    dof = n - k
    sigma2 = ssr / dof if dof > 0 else 0.0
    cov = sigma2 * xtx_inv
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))

    wsum = float(wv.sum())
    if X.intercept_included:
        ybar = float(wv @ yv) / wsum
        sst = float(wv @ ((yv - ybar) ** 2))
    else:
        sst = float(wv @ (yv**2))
    r2 = 1.0 - ssr / sst if sst > 0 else (1.0 if ssr == 0.0 else 0.0)
    # Guard against tiny negative values from cancellation on perfect fits.
    r2 = min(1.0, max(0.0, r2))

    return FitResult(
        coefficients=beta,
        residuals=resid,
        se_homoskedastic=se,
        r_squared=r2,
        n_obs=n,
        column_labels=X.column_labels,
        cov_homoskedastic=cov,
        weights=w,
        xtx_inv=xtx_inv,
    )


def _scores(fit: FitResult, X: DesignMatrix) -> np.ndarray:
    w = fit.weights if fit.weights is not None else np.ones(fit.n_obs)
    return X.values * (w * fit.residuals)[:, None]


def cluster_robust_cov(
    fit: FitResult, X: DesignMatrix, cluster_ids, extra_df: int = 0
) -> np.ndarray:
    """CR1 cluster-robust covariance of the fitted coefficients.

    meat = sum_g (X_g' W_g e_g)(X_g' W_g e_g)',  bread = (X'WX)^{-1},
    scaled by G/(G-1) * (N-1)/(N-K-extra_df).  ``extra_df`` accounts for
    parameters absorbed before the fit (e.g. demeaned fixed effects).
    """
    ids = np.asarray(cluster_ids)
    n, k = X.values.shape
    if ids.shape[0] != n:
        raise DimensionMismatch(f"{ids.shape[0]} cluster ids for {n} rows")
    if fit.n_obs != n or len(fit.column_labels) != k:
        raise DimensionMismatch("fit and design matrix do not correspond")
    uniques, codes = np.unique(ids, return_inverse=True)
    g = uniques.shape[0]
    if g < 2:
        raise SingleCluster(f"need at least 2 clusters, got {g}")
    scores = _scores(fit, X)
    sums = np.zeros((g, k))
    np.add.at(sums, codes, scores)
    meat = sums.T @ sums
    denom = n - k - extra_df
    if denom <= 0:
        raise DimensionMismatch(
            f"non-positive residual degrees of freedom: n={n}, k={k}, extra={extra_df}"
        )
    factor = (g / (g - 1.0)) * ((n - 1.0) / denom)
    bread = fit.xtx_inv
    return factor * bread @ meat @ bread


def cluster_robust_se(
    fit: FitResult, X: DesignMatrix, cluster_ids, extra_df: int = 0
) -> np.ndarray:
    """Square roots of the CR1 covariance diagonal, one per column.

    With every row its own cluster this reduces exactly to HC1.  Zero
    residuals produce zero standard errors.
    """
    cov = cluster_robust_cov(fit, X, cluster_ids, extra_df=extra_df)
    return np.sqrt(np.maximum(np.diag(cov), 0.0))


def hc1_cov(fit: FitResult, X: DesignMatrix) -> np.ndarray:
    """HC1 heteroskedasticity-robust covariance (no clustering)."""
    n, k = X.values.shape
    scores = _scores(fit, X)
    meat = scores.T @ scores
    factor = n / (n - k)
    bread = fit.xtx_inv
    return factor * bread @ meat @ bread


def absorb_fixed_effects(
    X: DesignMatrix, y, group_ids, weights=None
) -> tuple[DesignMatrix, np.ndarray]:
    """Demean ``X`` and ``y`` within groups (one absorbed fixed effect).

    An OLS fit on the demeaned data reproduces the slope coefficients of
    the regression with one dummy per group.  Pass the same ``weights`` as
    the subsequent fit so the group means are weighted consistently.  The
    input design should not contain an intercept (it would demean to a
    zero column and trip the rank check downstream).
    """
    ids = np.asarray(group_ids)
    yv = np.asarray(y, dtype=float).ravel()
    n = X.n_rows
    if ids.shape[0] != n or yv.shape[0] != n:
        raise DimensionMismatch("group ids / response length mismatch")
    w = _check_weights(weights, n, X.n_columns)
    wv = np.ones(n) if w is None else w

    _, codes = np.unique(ids, return_inverse=True)
    g = codes.max() + 1
    wsum = np.bincount(codes, weights=wv, minlength=g)
    if (wsum <= 0).any():
        raise DimensionMismatch("every group needs positive total weight")

    def demean(col: np.ndarray) -> np.ndarray:
        means = np.bincount(codes, weights=wv * col, minlength=g) / wsum
        return col - means[codes]

    cols = [demean(X.values[:, j]) for j in range(X.n_columns)]
    x_dm = DesignMatrix(
        np.column_stack(cols), X.column_labels, intercept_included=False
    )
    return x_dm, demean(yv)


def tsls_fit(
    y,
    X_endog: DesignMatrix,
    X_exog: DesignMatrix | None,
    Z: DesignMatrix,
) -> FitResult:
    """Two-stage least squares.

    Endogenous columns are replaced by their first-stage fitted values
    (instruments plus exogenous columns); the second stage is plain OLS.
    Standard errors use residuals recomputed with the *original* endogenous
    values, the conventional 2SLS covariance.  A first-stage F statistic
    for the excluded instruments is attached per endogenous column.
    """
    yv = np.asarray(y, dtype=float).ravel()
    n = X_endog.n_rows
    if yv.shape[0] != n or Z.n_rows != n:
        raise DimensionMismatch("row mismatch between y, endogenous block, instruments")
    if X_exog is not None and X_exog.n_rows != n:
        raise DimensionMismatch("row mismatch for exogenous block")
    if Z.n_columns < X_endog.n_columns:
        raise UnderIdentified(
            f"{Z.n_columns} instruments for {X_endog.n_columns} endogenous columns"
        )
    if not np.isfinite(yv).all():
        raise NonFiniteInput("response vector contains NaN or infinity")

    exog_vals = (
        X_exog.values if X_exog is not None else np.empty((n, 0))
    )
    exog_labels = X_exog.column_labels if X_exog is not None else ()
    has_const = X_exog.intercept_included if X_exog is not None else False

    fs_labels = exog_labels + tuple(f"_z_{c}" for c in Z.column_labels)
    fs_design = DesignMatrix(
        np.column_stack([exog_vals, Z.values]), fs_labels, intercept_included=has_const
    )

    fitted = np.empty_like(X_endog.values)
    first_stage_f: dict[str, float] = {}
    q = Z.n_columns
    for j, label in enumerate(X_endog.column_labels):
        xj = X_endog.values[:, j]
        fs = ols_fit(fs_design, xj)
        fitted[:, j] = xj - fs.residuals
        ssr_u = float(fs.residuals @ fs.residuals)
        if exog_vals.shape[1] > 0:
            restricted = ols_fit(
                DesignMatrix(exog_vals, exog_labels, intercept_included=has_const), xj
            )
            ssr_r = float(restricted.residuals @ restricted.residuals)
        else:
            ssr_r = float(xj @ xj)
        dof = n - fs_design.n_columns
        if ssr_u <= 0 or dof <= 0:
            first_stage_f[label] = math.inf
        else:
            first_stage_f[label] = ((ssr_r - ssr_u) / q) / (ssr_u / dof)

    labels = X_endog.column_labels + exog_labels
    second = DesignMatrix(
        np.column_stack([fitted, exog_vals]), labels, intercept_included=has_const
    )
    stage2 = ols_fit(second, yv)
    beta = stage2.coefficients

    # Structural residuals with the original endogenous values.
    resid = yv - np.column_stack([X_endog.values, exog_vals]) @ beta
    k = second.n_columns
    sigma2 = float(resid @ resid) / (n - k) if n > k else 0.0
    cov = sigma2 * stage2.xtx_inv
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))

    if has_const:
        sst = float(((yv - yv.mean()) ** 2).sum())
    else:
        sst = float((yv**2).sum())
    ssr = float(resid @ resid)
    r2 = min(1.0, max(0.0, 1.0 - ssr / sst)) if sst > 0 else 0.0

    return FitResult(
        coefficients=beta,
        residuals=resid,
        se_homoskedastic=se,
        r_squared=r2,
        n_obs=n,
        column_labels=labels,
        cov_homoskedastic=cov,
        weights=None,
        first_stage_f=first_stage_f,
        xtx_inv=stage2.xtx_inv,
    )


def delta_ratio(
    fit: FitResult,
    numerator_label: str,
    denominator_label: str,
    coef_cov: np.ndarray,
) -> RatioEstimate:
    """Ratio of two coefficients with its delta-method standard error.

    For r = b_num / b_den the gradient is (1/b_den, -b_num/b_den^2) and
    se(r) = sqrt(g' V g) on the 2x2 covariance block of the two
    coefficients.
    """
    cov = np.asarray(coef_cov, dtype=float)
    k = len(fit.column_labels)
    if cov.shape != (k, k):
        raise DimensionMismatch(f"covariance must be {k}x{k}, got {cov.shape}")
    i = fit.column_labels.index(numerator_label)
    j = fit.column_labels.index(denominator_label)
    b_num = float(fit.coefficients[i])
    b_den = float(fit.coefficients[j])
    if abs(b_den) < 1e-12:
        raise DenominatorNearZero(
            f"denominator coefficient {denominator_label!r} is {b_den:.3e}"
        )
    grad = np.array([1.0 / b_den, -b_num / b_den**2])
    block = cov[np.ix_([i, j], [i, j])]
    var = float(grad @ block @ grad)
    return RatioEstimate(
        value=b_num / b_den,
        se=math.sqrt(max(var, 0.0)),
        numerator_label=numerator_label,
        denominator_label=denominator_label,
    )
