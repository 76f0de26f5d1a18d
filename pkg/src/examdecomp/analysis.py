"""Outcome analysis on top of the per-student skill estimates.

Covers the downstream questions the decomposition exists to answer:

* wage/enrollment returns to the two skills (OLS, nonparametric deciles,
  and an instrumental-variables design using a prior sitting's estimates
  to purge estimation noise),
* returns heterogeneity across employer/occupation style groups,
* group score-gap decompositions with a halve-the-position-effect
  counterfactual,
* per-question predictive validity and how it varies with the position a
  question was shown at.

Skills are standardized before any returns regression; ``skill_scale``
chooses between the raw sample dispersion of the estimates ("sample") and
the noise-corrected dispersion ("latent"), the latter being the scale on
which the IV estimator is consistent for the per-true-SD return.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.stats

from . import regress
from .decompose import SkillEstimates, implied_score
from .errors import (
    DegenerateVariance,
    DimensionMismatch,
    Empty,
    EmptyGroup,
    MethodUnknown,
    NoWithinVariation,
    TooFewMatched,
    WeakInstrument,
)

OUTCOME_LABELS = ("log_wage", "enrolled", "college_quality")


def _match_ids(*id_arrays):
    """Indices aligning every array to the common sorted id set."""
    common = id_arrays[0]
    for ids in id_arrays[1:]:
        common = np.intersect1d(common, ids)
    out = []
    for ids in id_arrays:
        order = np.argsort(ids, kind="stable")
        pos = np.searchsorted(ids[order], common)
        out.append(order[pos])
    return common, out


def _standardize(values: np.ndarray, ses: np.ndarray | None, scale: str) -> np.ndarray:
    if scale == "sample":
        sd = float(values.std())
    elif scale == "latent":
        if ses is None:
            raise DimensionMismatch("latent scaling needs standard errors")
        sig = float(values.var(ddof=1)) - float((ses**2).mean())
        sd = float(np.sqrt(sig)) if sig > 0 else 0.0
    else:
        raise MethodUnknown(f"skill_scale must be 'sample' or 'latent', got {scale!r}")
    # a column that is constant to machine precision is degenerate even if
    # rounding leaves its std a hair above zero
    tiny = 1e-12 * max(1.0, abs(float(values.mean())))
    if not np.isfinite(sd) or sd <= tiny:
        raise DegenerateVariance(f"{scale} dispersion is not positive")
    return (values - values.mean()) / sd


# ---------------------------------------------------------------------------
# returns


@dataclass
class ReturnsResult:
    outcome_label: str
    spec: str
    coefficients: dict[str, float]
    ses: dict[str, float]
    ratio: regress.RatioEstimate | None
    n: int
    r_squared: float


def returns_ols(
    outcomes,
    estimates: SkillEstimates,
    outcome_label: str = "log_wage",
    spec: str = "skills",
    controls: bool = True,
    precision_weights: bool = False,
    skill_scale: str = "sample",
    min_matched: int = 100,
) -> ReturnsResult:
    """Regress an outcome on standardized skills (or the raw score).

    spec "skills" uses both standardized skill estimates and reports the
    endurance/ability return ratio with a delta-method standard error;
    "score_only" uses the standardized fraction correct.  Standard errors
    are clustered at the student level (equivalently HC1 here, one row
    per student).  ``precision_weights`` weights students by
    1 / (se_alpha^2 + se_beta^2).
    """
    ids, (io, ie) = _match_ids(outcomes.student_ids, estimates.student_ids)
    n = ids.shape[0]
    if n < min_matched:
        raise Empty(f"only {n} matched students (need >= {min_matched})")
    y = outcomes.outcome(outcome_label)[io]

    cols: dict[str, np.ndarray] = {}
    if spec == "skills":
        cols["ability"] = _standardize(
            estimates.alpha_hat[ie], estimates.se_alpha[ie], skill_scale
        )
        cols["endurance"] = _standardize(
            estimates.beta_hat[ie], estimates.se_beta[ie], skill_scale
        )
    elif spec == "score_only":
        cols["score"] = _standardize(implied_score(estimates)[ie], None, "sample")
    else:
        raise MethodUnknown(f"spec must be 'skills' or 'score_only', got {spec!r}")
    if controls:
        for k, lab in enumerate(outcomes.control_labels):
            cols[lab] = outcomes.controls[io, k]

    x = regress.design_from_columns(cols, add_intercept=True)
    weights = None
    if precision_weights:
        weights = 1.0 / (estimates.se_alpha[ie] ** 2 + estimates.se_beta[ie] ** 2)
    fit = regress.ols_fit(x, y, weights=weights)
    cov = regress.cluster_robust_cov(fit, x, ids)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))

    ratio = None
    if spec == "skills":
        ratio = regress.delta_ratio(fit, "endurance", "ability", cov)

    labels = x.column_labels
    return ReturnsResult(
        outcome_label=outcome_label,
        spec=spec,
        coefficients={l: float(b) for l, b in zip(labels, fit.coefficients)},
        ses={l: float(s) for l, s in zip(labels, se)},
        ratio=ratio,
        n=n,
        r_squared=fit.r_squared,
    )


def _decile_of(values: np.ndarray, ids: np.ndarray, n_bins: int = 10) -> np.ndarray:
    """Equal-count decile index 0..9; ties broken by student id."""
    n = values.shape[0]
    order = np.lexsort((ids, values))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    return rank * n_bins // n


@dataclass
class DecileReturns:
    outcome_label: str
    skill: np.ndarray  # "ability"/"endurance" per row
    decile: np.ndarray  # 2..10 (bottom decile omitted)
    coefficient: np.ndarray
    se: np.ndarray
    n: int

    def top_coefficient(self, skill: str) -> float:
        mask = (self.skill == skill) & (self.decile == 10)
        return float(self.coefficient[mask][0])


def returns_decile(
    outcomes,
    estimates: SkillEstimates,
    outcome_label: str = "log_wage",
    controls: bool = False,
    min_students: int = 1000,
) -> DecileReturns:
    """Nonparametric returns: dummies for deciles 2..10 of both skills.

    The bottom decile is the omitted category, so each coefficient is the
    outcome difference relative to the lowest tenth.
    """
    ids, (io, ie) = _match_ids(outcomes.student_ids, estimates.student_ids)
    n = ids.shape[0]
    if n < min_students:
        raise Empty(f"decile returns need >= {min_students} students, got {n}")
    y = outcomes.outcome(outcome_label)[io]
    dec_a = _decile_of(estimates.alpha_hat[ie], ids)
    dec_b = _decile_of(estimates.beta_hat[ie], ids)

    cols: dict[str, np.ndarray] = {}
    for d in range(1, 10):
        cols[f"ability_d{d + 1}"] = (dec_a == d).astype(float)
    for d in range(1, 10):
        cols[f"endurance_d{d + 1}"] = (dec_b == d).astype(float)
    if controls:
        for k, lab in enumerate(outcomes.control_labels):
            cols[lab] = outcomes.controls[io, k]
    x = regress.design_from_columns(cols, add_intercept=True)
    fit = regress.ols_fit(x, y)
    se = regress.cluster_robust_se(fit, x, ids)

    skills, deciles, coefs, ses = [], [], [], []
    for name, prefix in (("ability", "ability_d"), ("endurance", "endurance_d")):
        for d in range(2, 11):
            idx = x.column_labels.index(f"{prefix}{d}")
            skills.append(name)
            deciles.append(d)
            coefs.append(float(fit.coefficients[idx]))
            ses.append(float(se[idx]))
    return DecileReturns(
        outcome_label=outcome_label,
        skill=np.array(skills, dtype=object),
        decile=np.array(deciles, dtype=np.int64),
        coefficient=np.array(coefs),
        se=np.array(ses),
        n=n,
    )


@dataclass
class IVReturns:
    outcome_label: str
    iv_coefficients: dict[str, float]
    iv_ses: dict[str, float]
    ols_coefficients: dict[str, float]
    ols_ses: dict[str, float]
    first_stage_f: dict[str, float]
    n: int


def returns_iv(
    outcomes,
    estimates_current: SkillEstimates,
    estimates_previous: SkillEstimates,
    outcome_label: str = "log_wage",
    controls: bool = True,
    skill_scale: str = "latent",
    min_matched: int = 500,
) -> IVReturns:
    """Instrument current-sitting skills with a previous sitting's.

    Estimation noise in the skill estimates attenuates OLS returns; the
    prior sitting's estimates share the latent skill but have independent
    noise, so two-stage least squares recovers the return per latent
    standard deviation (the default scaling).  Warns when the smallest
    first-stage F falls below 10.  A matched OLS fit on the identical
    design is reported for comparison.
    """
    ids, (io, ic, ip) = _match_ids(
        outcomes.student_ids,
        estimates_current.student_ids,
        estimates_previous.student_ids,
    )
    n = ids.shape[0]
    if n < min_matched:
        raise TooFewMatched(f"only {n} matched retakers (need >= {min_matched})")
    y = outcomes.outcome(outcome_label)[io]

    endog = regress.DesignMatrix(
        np.column_stack(
            [
                _standardize(
                    estimates_current.alpha_hat[ic],
                    estimates_current.se_alpha[ic],
                    skill_scale,
                ),
                _standardize(
                    estimates_current.beta_hat[ic],
                    estimates_current.se_beta[ic],
                    skill_scale,
                ),
            ]
        ),
        ("ability", "endurance"),
    )
    z = regress.DesignMatrix(
        np.column_stack(
            [
                _standardize(
                    estimates_previous.alpha_hat[ip],
                    estimates_previous.se_alpha[ip],
                    skill_scale,
                ),
                _standardize(
                    estimates_previous.beta_hat[ip],
                    estimates_previous.se_beta[ip],
                    skill_scale,
                ),
            ]
        ),
        ("ability_prev", "endurance_prev"),
    )
    exog_cols: dict[str, np.ndarray] = {}
    if controls:
        for k, lab in enumerate(outcomes.control_labels):
            exog_cols[lab] = outcomes.controls[io, k]
    if exog_cols:
        exog = regress.design_from_columns(exog_cols, add_intercept=True)
    else:
        exog = regress.DesignMatrix(
            np.ones((n, 1)), ("const",), intercept_included=True
        )

    iv = regress.tsls_fit(y, endog, exog, z)
    min_f = min(iv.first_stage_f.values())
    if min_f < 10.0:
        warnings.warn(
            f"weak instruments: smallest first-stage F = {min_f:.2f}", WeakInstrument
        )

    x_ols = regress.DesignMatrix(
        np.column_stack([endog.values, exog.values]),
        endog.column_labels + exog.column_labels,
        intercept_included=True,
    )
    ols = regress.ols_fit(x_ols, y)
    ols_se = regress.cluster_robust_se(ols, x_ols, ids)

    return IVReturns(
        outcome_label=outcome_label,
        iv_coefficients={l: float(b) for l, b in zip(iv.column_labels, iv.coefficients)},
        iv_ses={l: float(s) for l, s in zip(iv.column_labels, iv.se_homoskedastic)},
        ols_coefficients={
            l: float(b) for l, b in zip(x_ols.column_labels, ols.coefficients)
        },
        ols_ses={l: float(s) for l, s in zip(x_ols.column_labels, ols_se)},
        first_stage_f=dict(iv.first_stage_f),
        n=n,
    )


# ---------------------------------------------------------------------------
# heterogeneity across groups


@dataclass
class GroupReturns:
    group_field: str
    outcome_label: str
    group_id: np.ndarray
    n: np.ndarray
    psi_ability: np.ndarray
    se_ability: np.ndarray
    psi_endurance: np.ndarray
    se_endurance: np.ndarray
    mean_outcome: np.ndarray
    outcome_percentile: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.group_id.shape[0]


def group_returns(
    outcomes,
    estimates: SkillEstimates,
    group_field: str = "occupation_id",
    outcome_label: str = "log_wage",
    min_n: int = 200,
    skill_scale: str = "sample",
) -> GroupReturns:
    """Per-group skill returns with the group's mean-outcome percentile.

    Skills are standardized once on the full matched sample so
    coefficients are comparable across groups; groups smaller than
    ``min_n`` are dropped.
    """
    ids, (io, ie) = _match_ids(outcomes.student_ids, estimates.student_ids)
    if ids.shape[0] == 0:
        raise Empty("no matched students")
    y = outcomes.outcome(outcome_label)[io]
    za = _standardize(estimates.alpha_hat[ie], estimates.se_alpha[ie], skill_scale)
    zb = _standardize(estimates.beta_hat[ie], estimates.se_beta[ie], skill_scale)
    groups = np.asarray(getattr(outcomes, group_field))[io]

    kept, ns, pa, sa, pe, se_e, mw = [], [], [], [], [], [], []
    for g in np.unique(groups):
        rows = np.flatnonzero(groups == g)
        if rows.shape[0] < min_n:
            continue
        x = regress.DesignMatrix(
            np.column_stack([np.ones(rows.shape[0]), za[rows], zb[rows]]),
            ("const", "ability", "endurance"),
            intercept_included=True,
        )
        fit = regress.ols_fit(x, y[rows])
        ses = regress.cluster_robust_se(fit, x, ids[rows])
        kept.append(g)
        ns.append(rows.shape[0])
        pa.append(float(fit.coefficients[1]))
        sa.append(float(ses[1]))
        pe.append(float(fit.coefficients[2]))
        se_e.append(float(ses[2]))
        mw.append(float(y[rows].mean()))
    if not kept:
        raise Empty(f"no group reached min_n={min_n}")
    mean_outcome = np.array(mw)
    order = np.argsort(np.argsort(mean_outcome, kind="stable"), kind="stable")
    g_count = len(kept)
    pct = order / (g_count - 1) if g_count > 1 else np.full(g_count, 0.5)
    return GroupReturns(
        group_field=group_field,
        outcome_label=outcome_label,
        group_id=np.array(kept),
        n=np.array(ns, dtype=np.int64),
        psi_ability=np.array(pa),
        se_ability=np.array(sa),
        psi_endurance=np.array(pe),
        se_endurance=np.array(se_e),
        mean_outcome=mean_outcome,
        outcome_percentile=pct,
    )


def overdispersion_test(values, ses) -> tuple[float, int, float]:
    """Chi-square test that per-group estimates vary only by sampling noise.

    Returns (statistic, degrees of freedom, p-value) for
    sum_g ((v_g - weighted_mean) / se_g)^2 against chi2(G - 1).
    """
    v = np.asarray(values, dtype=float)
    s = np.asarray(ses, dtype=float)
    if v.shape != s.shape or v.shape[0] < 2:
        raise DimensionMismatch("need >= 2 (value, se) pairs of equal length")
    if (s <= 0).any():
        raise DegenerateVariance("all standard errors must be positive")
    w = 1.0 / s**2
    mu = float((w * v).sum() / w.sum())
    stat = float(((v - mu) ** 2 * w).sum())
    df = v.shape[0] - 1
    return stat, df, float(scipy.stats.chi2.sf(stat, df))


# ---------------------------------------------------------------------------
# gap decomposition and reform counterfactual


@dataclass
class GapReport:
    variant: str
    score_gap: float
    se_score_gap: float
    ability_component: float
    se_ability_component: float
    endurance_component: float
    se_endurance_component: float
    mean_posnorm: float
    n_group1: int
    n_group0: int
    residual: float | None = None
    # second moments for delta-method downstream (unconditional only)
    var_endurance_component: float | None = None
    var_score_gap: float | None = None
    cov_endurance_gap: float | None = None


def gap_decomposition(
    estimates: SkillEstimates,
    group_flag,
    mean_posnorm: float | None = None,
    variant: str = "unconditional",
) -> GapReport:
    """Split a group score gap into ability and endurance components.

    unconditional: components are the raw group differences in mean
    ability and (mean endurance x mean position); they sum to the
    implied-score gap exactly on complete data.  regression_adjusted:
    each skill gap is the group coefficient from a regression of that
    skill on the flag controlling for the other skill (components need
    not sum to the gap).
    """
    flag = np.asarray(group_flag, dtype=bool)
    if flag.shape[0] != estimates.n_students:
        raise DimensionMismatch("group_flag must align with the estimates")
    n1 = int(flag.sum())
    n0 = int((~flag).sum())
    if n1 == 0 or n0 == 0:
        raise EmptyGroup(f"group sizes {n1} / {n0}")
    if variant not in ("unconditional", "regression_adjusted"):
        raise MethodUnknown(f"unknown gap variant {variant!r}")

    mpos = (
        float(mean_posnorm)
        if mean_posnorm is not None
        else float(estimates.mean_posnorm.mean())
    )
    scores = implied_score(estimates)
    a, b = estimates.alpha_hat, estimates.beta_hat
    s1, s0 = scores[flag], scores[~flag]
    score_gap = float(s1.mean() - s0.mean())
    var_gap = s1.var(ddof=1) / n1 + s0.var(ddof=1) / n0
    se_gap = float(np.sqrt(var_gap))

    if variant == "unconditional":
        d_alpha = float(a[flag].mean() - a[~flag].mean())
        d_beta = float(b[flag].mean() - b[~flag].mean())
        var_da = a[flag].var(ddof=1) / n1 + a[~flag].var(ddof=1) / n0
        var_db = b[flag].var(ddof=1) / n1 + b[~flag].var(ddof=1) / n0
        cov_ab = (
            np.cov(a[flag], b[flag], ddof=1)[0, 1] / n1
            + np.cov(a[~flag], b[~flag], ddof=1)[0, 1] / n0
        )
        endurance = d_beta * mpos
        var_end = var_db * mpos**2
        return GapReport(
            variant=variant,
            score_gap=score_gap,
            se_score_gap=se_gap,
            ability_component=d_alpha,
            se_ability_component=float(np.sqrt(var_da)),
            endurance_component=endurance,
            se_endurance_component=float(np.sqrt(var_end)),
            mean_posnorm=mpos,
            n_group1=n1,
            n_group0=n0,
            residual=score_gap - (d_alpha + endurance),
            var_endurance_component=float(var_end),
            var_score_gap=float(var_gap),
            cov_endurance_gap=float(mpos * cov_ab + var_end),
        )

    # regression_adjusted: group gap in each skill conditional on the other
    flag_f = flag.astype(float)
    x_a = regress.design_from_columns({"group": flag_f, "endurance": b})
    fit_a = regress.ols_fit(x_a, a)
    se_a = regress.cluster_robust_se(fit_a, x_a, estimates.student_ids)
    x_b = regress.design_from_columns({"group": flag_f, "ability": a})
    fit_b = regress.ols_fit(x_b, b)
    se_b = regress.cluster_robust_se(fit_b, x_b, estimates.student_ids)
    i_a = x_a.column_labels.index("group")
    i_b = x_b.column_labels.index("group")
    return GapReport(
        variant=variant,
        score_gap=score_gap,
        se_score_gap=se_gap,
        ability_component=float(fit_a.coefficients[i_a]),
        se_ability_component=float(se_a[i_a]),
        endurance_component=float(fit_b.coefficients[i_b]) * mpos,
        se_endurance_component=float(se_b[i_b]) * abs(mpos),
        mean_posnorm=mpos,
        n_group1=n1,
        n_group0=n0,
    )


@dataclass(frozen=True)
class ReformResult:
    """Effect on the score gap of scaling position effects by ``factor``."""

    factor: float
    delta_pp: float
    se_delta_pp: float
    delta_pct: float | None
    se_delta_pct: float | None


def reform_counterfactual(report: GapReport, factor: float = 0.5) -> ReformResult:
    """Counterfactual gap change if position effects shrank to ``factor``.

    delta_pp = -endurance_component * (1 - factor): the change in the
    score gap when the per-position decline is multiplied by ``factor``
    (halved by default).  delta_pct expresses it relative to the baseline
    gap and is absent when the gap is zero.
    """
    if not 0.0 <= factor <= 1.0:
        raise MethodUnknown(f"factor must be in [0, 1], got {factor}")
    scale = 1.0 - factor
    delta_pp = -report.endurance_component * scale
    se_pp = report.se_endurance_component * scale
    if report.score_gap == 0.0:
        return ReformResult(factor, delta_pp, se_pp, None, None)
    delta_pct = delta_pp / report.score_gap
    se_pct = None
    if (
        report.var_endurance_component is not None
        and report.var_score_gap is not None
        and report.cov_endurance_gap is not None
    ):
        e, g = report.endurance_component, report.score_gap
        grad = np.array([-scale / g, e * scale / g**2])
        cov = np.array(
            [
                [report.var_endurance_component, report.cov_endurance_gap],
                [report.cov_endurance_gap, report.var_score_gap],
            ]
        )
        se_pct = float(np.sqrt(max(grad @ cov @ grad, 0.0)))
    return ReformResult(factor, delta_pp, se_pp, delta_pct, se_pct)


# ---------------------------------------------------------------------------
# question-level predictive validity


@dataclass
class ValidityTable:
    """Per (question, booklet) correlation of an outcome with correctness."""

    outcome_label: str
    question_id: np.ndarray
    booklet: np.ndarray
    day: np.ndarray
    position: np.ndarray
    n_students: np.ndarray
    fraction_correct: np.ndarray
    rho: np.ndarray
    se_rho: np.ndarray
    n_skipped_small: int
    n_skipped_degenerate: int

    @property
    def n_cells(self) -> int:
        return self.question_id.shape[0]


def question_validity(
    responses,
    outcomes,
    outcome_label: str = "log_wage",
    min_cell: int = 50,
) -> ValidityTable:
    """Outcome-correctness correlation per question-booklet cell.

    rho = (E[Y|correct] - E[Y|incorrect]) * sigma_C / sigma_Y with
    sigma_C = sqrt(pi (1 - pi)), which equals the Pearson correlation of
    Y with the correctness indicator (population moments).  Cells smaller
    than ``min_cell`` or with no variation in either variable are skipped
    and counted.  ``outcome_label`` "score_loo" correlates each question
    with the leave-that-question-out test score instead.
    """
    design = responses.design
    loo = outcome_label == "score_loo"
    if loo:
        ids, (ir,) = _match_ids(responses.student_ids)
        y_resp = None
    else:
        ids, (io, ir) = _match_ids(outcomes.student_ids, responses.student_ids)
        y_resp = outcomes.outcome(outcome_label)[io]
    if ids.shape[0] == 0:
        raise Empty("no matched students")

    j_total = design.n_questions
    total_correct = responses.correct[ir].sum(axis=1).astype(float) if loo else None

    qids, bks, days_, poss, ms, pis, rhos, ses = [], [], [], [], [], [], [], []
    skipped_small = 0
    skipped_degenerate = 0
    for day in range(design.days):
        cols = np.flatnonzero(design.day_of == day)
        day_booklet = responses.booklet[ir, day]
        for b in np.unique(day_booklet):
            rows = np.flatnonzero(day_booklet == b)
            m = rows.shape[0]
            if m < min_cell or m <= 3:
                skipped_small += cols.shape[0]
                continue
            c = responses.correct[ir][rows][:, cols].astype(float)
            pi = c.mean(axis=0)
            count1 = c.sum(axis=0)
            var_c = pi * (1.0 - pi)
            if loo:
                t = total_correct[rows]
                var_t = float(t.var())
                cov_tc = (c.T @ t) / m - t.mean() * pi
                cov_yc = (cov_tc - var_c) / (j_total - 1)
                var_y = (var_t - 2.0 * cov_tc + var_c) / (j_total - 1) ** 2
                eligible = (var_c > 0) & (var_y > 0)
                rho = np.zeros(cols.shape[0])
                rho[eligible] = cov_yc[eligible] / np.sqrt(
                    var_y[eligible] * var_c[eligible]
                )
            else:
                yv = y_resp[rows]
                sigma_y = float(yv.std())
                if sigma_y == 0.0:
                    skipped_degenerate += cols.shape[0]
                    continue
                sum_y1 = c.T @ yv
                eligible = (count1 > 0) & (count1 < m)
                e1 = np.zeros(cols.shape[0])
                e0 = np.zeros(cols.shape[0])
                e1[eligible] = sum_y1[eligible] / count1[eligible]
                e0[eligible] = (yv.sum() - sum_y1[eligible]) / (m - count1[eligible])
                rho = (e1 - e0) * np.sqrt(var_c) / sigma_y
            skipped_degenerate += int((~eligible).sum())
            pos_b = design.position[b - 1, cols]
            for k in np.flatnonzero(eligible):
                qids.append(int(design.question_ids[cols[k]]))
                bks.append(int(b))
                days_.append(day)
                poss.append(int(pos_b[k]))
                ms.append(m)
                pis.append(float(pi[k]))
                rhos.append(float(rho[k]))
                ses.append(1.0 / np.sqrt(m - 3.0))
    return ValidityTable(
        outcome_label=outcome_label,
        question_id=np.array(qids, dtype=np.int64),
        booklet=np.array(bks, dtype=np.int64),
        day=np.array(days_, dtype=np.int64),
        position=np.array(poss, dtype=np.int64),
        n_students=np.array(ms, dtype=np.int64),
        fraction_correct=np.array(pis),
        rho=np.array(rhos),
        se_rho=np.array(ses),
        n_skipped_small=skipped_small,
        n_skipped_degenerate=skipped_degenerate,
    )


@dataclass(frozen=True)
class ValidityReform:
    outcome_label: str
    gamma_per_position: float
    se_gamma: float
    gamma_reform: float
    se_gamma_reform: float
    t_stat: float
    pct_of_mean: float | None
    mean_rho: float
    mean_position: float
    n_cells: int
    n_questions: int


def validity_reform_regression(validity: ValidityTable) -> ValidityReform:
    """Within-question slope of validity on position, and the halving effect.

    Weighted least squares with question fixed effects absorbed, weights
    1/se_rho^2, standard errors clustered at the question-position level.
    gamma_reform = -(slope per position) * mean_position / 2 is the
    predicted validity change from halving every question's position.
    """
    if validity.n_cells == 0:
        raise Empty("validity table has no cells")
    w = 1.0 / validity.se_rho**2
    x = regress.DesignMatrix(
        validity.position.astype(float).reshape(-1, 1),
        ("position",),
        intercept_included=False,
    )
    x_dm, y_dm = regress.absorb_fixed_effects(
        x, validity.rho, validity.question_id, weights=w
    )
    if float((w * x_dm.values[:, 0] ** 2).sum()) <= 1e-12:
        raise NoWithinVariation("no within-question position variation in validity cells")
    fit = regress.ols_fit(x_dm, y_dm, weights=w)
    n_questions = np.unique(validity.question_id).shape[0]
    se = regress.cluster_robust_se(fit, x_dm, validity.position, extra_df=n_questions)

    gamma = float(fit.coefficients[0])
    se_gamma = float(se[0])
    mean_pos = float((w * validity.position).sum() / w.sum())
    mean_rho = float((w * validity.rho).sum() / w.sum())
    gamma_reform = -gamma * mean_pos / 2.0
    se_reform = se_gamma * mean_pos / 2.0
    return ValidityReform(
        outcome_label=validity.outcome_label,
        gamma_per_position=gamma,
        se_gamma=se_gamma,
        gamma_reform=gamma_reform,
        se_gamma_reform=se_reform,
        t_stat=gamma_reform / se_reform if se_reform > 0 else np.inf,
        pct_of_mean=gamma_reform / mean_rho if mean_rho != 0 else None,
        mean_rho=mean_rho,
        mean_position=mean_pos,
        n_cells=validity.n_cells,
        n_questions=n_questions,
    )


def validity_aggregation_check(validity: ValidityTable, responses, outcomes) -> float:
    """Verify that per-question validities aggregate to the score validity.

    Within each fixed booklet assignment, corr(Y, score) must equal
    (1/J) * sum_j (sigma_Cj / sigma_score) * rho_j.  Returns the largest
    absolute discrepancy across booklet combinations (population moments,
    so the identity is exact up to rounding).
    """
    if validity.outcome_label == "score_loo":
        raise MethodUnknown("aggregation check needs a fixed outcome, not score_loo")
    ids, (io, ir) = _match_ids(outcomes.student_ids, responses.student_ids)
    if ids.shape[0] == 0:
        raise Empty("no matched students")
    y_all = outcomes.outcome(validity.outcome_label)[io]
    combos, inverse = np.unique(responses.booklet[ir], axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    j = responses.n_questions
    worst = None
    for cidx in range(combos.shape[0]):
        rows = np.flatnonzero(inverse == cidx)
        if rows.shape[0] < 2:
            continue
        yv = y_all[rows]
        c = responses.correct[ir][rows].astype(float)
        t = c.mean(axis=1)
        sigma_y = float(yv.std())
        sigma_t = float(t.std())
        if sigma_y == 0.0 or sigma_t == 0.0:
            continue
        lhs = float(np.corrcoef(yv, t)[0, 1])
        yc = yv - yv.mean()
        cov_yc = (c.T @ yc) / rows.shape[0]  # Cov(Y, C_j) per question
        rhs = float(cov_yc.sum() / (j * sigma_y * sigma_t))
        disc = abs(lhs - rhs)
        worst = disc if worst is None else max(worst, disc)
    if worst is None:
        raise Empty("no booklet combination large enough for the check")
    return worst
