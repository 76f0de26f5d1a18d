"""Per-student decomposition of test scores into two skills.

Each student's correct/incorrect indicators are regressed on normalized
question position (and, optionally, demeaned question difficulty):

    correct_ij = alpha_i + beta_i * pos_norm_ij + delta_i * difficulty_j + e_ij

``alpha_hat`` is the student's expected accuracy on a question of average
difficulty at the start of a day ("ability"); ``beta_hat`` is the accuracy
change over a full day ("endurance").  Because the fit has an intercept,
the observed fraction correct equals

    alpha_hat + beta_hat * mean_posnorm + delta_hat * mean_difficulty + fe_adjust

exactly, which downstream gap decompositions rely on.

Cohort fits are batched by booklet assignment: students who sat the same
booklets share a design matrix, so one factorization serves thousands of
students.  The batched products use ``np.einsum`` with fixed summation
order, keeping results byte-identical across BLAS thread settings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import regress
from .errors import (
    DegenerateVariance,
    DimensionMismatch,
    Empty,
    MethodUnknown,
    MissingDifficulty,
    TooFewItems,
    TooFewMatched,
    ZeroPositionVariance,
)

SPECS = (
    "baseline",
    "day_fe",
    "subject_fe",
    "per_day_avg",
    "per_subject_avg",
    "correlation",
)

DEMEAN_MODES = ("per_booklet", "global")


@dataclass
class SkillEstimates:
    """Columnar table of per-student skill estimates, sorted by student id."""

    spec: str
    student_ids: np.ndarray
    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    delta_hat: np.ndarray
    se_alpha: np.ndarray
    se_beta: np.ndarray
    n_items: np.ndarray
    mean_posnorm: np.ndarray
    mean_difficulty: np.ndarray
    fe_adjust: np.ndarray
    excluded: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_students(self) -> int:
        return self.student_ids.shape[0]

    def subset(self, mask: np.ndarray) -> "SkillEstimates":
        mask = np.asarray(mask, dtype=bool)
        return SkillEstimates(
            spec=self.spec,
            student_ids=self.student_ids[mask],
            alpha_hat=self.alpha_hat[mask],
            beta_hat=self.beta_hat[mask],
            delta_hat=self.delta_hat[mask],
            se_alpha=self.se_alpha[mask],
            se_beta=self.se_beta[mask],
            n_items=self.n_items[mask],
            mean_posnorm=self.mean_posnorm[mask],
            mean_difficulty=self.mean_difficulty[mask],
            fe_adjust=self.fe_adjust[mask],
            excluded=list(self.excluded),
        )


@dataclass(frozen=True)
class SkillRow:
    """One student's decomposition."""

    student_id: int
    spec: str
    alpha_hat: float
    beta_hat: float
    delta_hat: float
    se_alpha: float
    se_beta: float
    n_items: int
    mean_posnorm: float
    mean_difficulty: float
    fe_adjust: float


def _difficulty_vector(difficulty, design) -> np.ndarray | None:
    """Raw (not yet demeaned) difficulty aligned to the design's questions."""
    if difficulty is None:
        return None
    if hasattr(difficulty, "values_for"):
        try:
            return np.asarray(difficulty.values_for(design.question_ids), dtype=float)
        except DimensionMismatch as exc:
            raise MissingDifficulty(str(exc)) from None
    vals = np.asarray(difficulty, dtype=float).ravel()
    if vals.shape[0] != design.n_questions:
        raise MissingDifficulty(
            f"{vals.shape[0]} difficulty values for {design.n_questions} questions"
        )
    return vals


def _spec_columns(design, posn: np.ndarray, diff_dm: np.ndarray | None, spec: str):
    """Design columns for one booklet combination.

    Returns (X, labels, extra_col_means) where ``extra_col_means`` are the
    item-set means of any fixed-effect dummy columns (used to keep the
    fitted-mean identity exact for fe specs).
    """
    j = posn.shape[0]
    cols = [np.ones(j), posn]
    labels = ["const", "pos_norm"]
    if diff_dm is not None:
        cols.append(diff_dm)
        labels.append("difficulty")
    extras: list[np.ndarray] = []
    if spec == "day_fe":
        for d in range(1, design.days):
            extras.append((design.day_of == d).astype(float))
            labels.append(f"day_{d}")
    elif spec == "subject_fe":
        subjects = sorted(set(design.subject_of.tolist()))
        for s in subjects[1:]:
            extras.append((design.subject_of == s).astype(float))
            labels.append(f"subject_{s}")
    cols.extend(extras)
    x = np.column_stack(cols)
    extra_means = (
        np.array([c.mean() for c in extras]) if extras else np.empty(0)
    )
    return x, labels, extra_means


def _solver(x: np.ndarray):
    """Pivoted-QR pseudoinverse and (X'X)^-1; raises on rank deficiency."""
    q, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0 or (diag < regress.RANK_TOL * diag[0]).any():
        raise regress.RankDeficient("per-student design is rank deficient")
    r_inv = scipy.linalg.solve_triangular(r, np.eye(r.shape[0]))
    pinv_piv = r_inv @ q.T
    pinv = np.empty_like(pinv_piv)
    pinv[piv] = pinv_piv
    xtx_inv_piv = r_inv @ r_inv.T
    xtx_inv = np.empty_like(xtx_inv_piv)
    xtx_inv[np.ix_(piv, piv)] = xtx_inv_piv
    return pinv, xtx_inv


def _fit_block(y: np.ndarray, x: np.ndarray):
    """Batched least squares of each row of ``y`` on shared design ``x``.

    Returns (coefs, sigma2) with coefs shaped (rows, k).  Uses einsum with
    a fixed reduction order for thread-count-independent determinism.
    """
    pinv, xtx_inv = _solver(x)
    coefs = np.einsum("kj,nj->nk", pinv, y)
    fitted = np.einsum("nk,jk->nj", coefs, x)
    resid = y - fitted
    ssr = np.einsum("nj,nj->n", resid, resid)
    dof = y.shape[1] - x.shape[1]
    sigma2 = ssr / dof if dof > 0 else np.zeros_like(ssr)
    return coefs, sigma2, xtx_inv


def decompose_cohort(
    responses,
    difficulty=None,
    spec: str = "baseline",
    demean: str = "per_booklet",
    min_items: int = 10,
    min_positions: int = 3,
) -> SkillEstimates:
    """Decompose every eligible student in one response matrix.

    Students failing the eligibility rules (fewer than ``min_items``
    questions, fewer than ``min_positions`` distinct positions, or a rank
    deficient design) are skipped and recorded in ``.excluded`` with a
    reason code instead of failing the batch.
    """
    if spec not in SPECS:
        raise MethodUnknown(f"spec must be one of {SPECS}, got {spec!r}")
    if demean not in DEMEAN_MODES:
        raise MethodUnknown(f"demean must be one of {DEMEAN_MODES}, got {demean!r}")
    design = responses.design
    n = responses.n_students
    j = design.n_questions
    if n == 0:
        raise Empty("no students to decompose")

    diff_raw = _difficulty_vector(difficulty, design)
    diff_global = diff_raw - diff_raw.mean() if diff_raw is not None else None

    ids = responses.student_ids
    alpha = np.full(n, np.nan)
    beta = np.full(n, np.nan)
    delta = np.zeros(n)
    se_a = np.full(n, np.nan)
    se_b = np.full(n, np.nan)
    mean_pn = np.full(n, np.nan)
    mean_df = np.zeros(n)
    fe_adj = np.zeros(n)
    ok = np.zeros(n, dtype=bool)
    excluded: list[tuple[int, str]] = []

    if j < min_items:
        excluded = [(int(s), "too_few_items") for s in ids]
        empty = np.empty(0)
        return SkillEstimates(
            spec=spec,
            student_ids=np.empty(0, dtype=ids.dtype),
            alpha_hat=empty,
            beta_hat=empty,
            delta_hat=empty,
            se_alpha=empty,
            se_beta=empty,
            n_items=np.empty(0, dtype=np.int64),
            mean_posnorm=empty,
            mean_difficulty=empty,
            fe_adjust=empty,
            excluded=excluded,
        )

    combos, inverse = np.unique(responses.booklet, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    has_diff = diff_raw is not None

    for c in range(combos.shape[0]):
        rows = np.flatnonzero(inverse == c)
        posn = (responses.position[rows[0]].astype(float) - 1.0) / (
            design.questions_per_day - 1.0
        )
        if np.unique(posn).shape[0] < min_positions:
            excluded.extend((int(ids[r]), "too_few_positions") for r in rows)
            continue
        if demean == "per_booklet" and has_diff:
            diff_dm = diff_raw - diff_raw.mean()
        else:
            diff_dm = diff_global
        y = responses.correct[rows].astype(float)

        try:
            if spec in ("baseline", "day_fe", "subject_fe", "correlation"):
                x, labels, extra_means = _spec_columns(design, posn, diff_dm, spec)
                coefs, sigma2, xtx_inv = _fit_block(y, x)
                var = np.diag(xtx_inv)
                alpha[rows] = coefs[:, 0]
                beta[rows] = coefs[:, 1]
                se_a[rows] = np.sqrt(sigma2 * var[0])
                se_b[rows] = np.sqrt(sigma2 * var[1])
                if has_diff:
                    delta[rows] = coefs[:, 2]
                n_extra = extra_means.shape[0]
                if n_extra:
                    fe_adj[rows] = coefs[:, -n_extra:] @ extra_means
                if spec == "correlation":
                    pc = posn - posn.mean()
                    sp = np.sqrt((pc**2).mean())
                    yc = y - y.mean(axis=1, keepdims=True)
                    sy = np.sqrt((yc**2).mean(axis=1))
                    cov = yc @ pc / j
                    with np.errstate(invalid="ignore", divide="ignore"):
                        r = np.where(sy > 0, cov / (sp * sy), 0.0)
                    beta[rows] = r
                    se_b[rows] = np.sqrt(np.maximum(1.0 - r**2, 0.0) / (j - 2))
            elif spec == "per_day_avg":
                _block_average(
                    design.day_of,
                    range(design.days),
                    design,
                    posn,
                    diff_dm,
                    y,
                    rows,
                    alpha,
                    beta,
                    delta,
                    se_a,
                    se_b,
                    has_diff,
                )
            else:  # per_subject_avg
                subjects = sorted(set(design.subject_of.tolist()))
                _block_average(
                    design.subject_of,
                    subjects,
                    design,
                    posn,
                    diff_dm,
                    y,
                    rows,
                    alpha,
                    beta,
                    delta,
                    se_a,
                    se_b,
                    has_diff,
                )
        except (regress.RankDeficient, ZeroPositionVariance):
            excluded.extend((int(ids[r]), "rank_deficient") for r in rows)
            continue

        mean_pn[rows] = posn.mean()
        mean_df[rows] = diff_dm.mean() if has_diff else 0.0
        ok[rows] = True

    order = np.argsort(ids[ok], kind="stable")
    sel = np.flatnonzero(ok)[order]
    excluded.sort(key=lambda t: t[0])
    return SkillEstimates(
        spec=spec,
        student_ids=ids[sel],
        alpha_hat=alpha[sel],
        beta_hat=beta[sel],
        delta_hat=delta[sel],
        se_alpha=se_a[sel],
        se_beta=se_b[sel],
        n_items=np.full(sel.shape[0], j, dtype=np.int64),
        mean_posnorm=mean_pn[sel],
        mean_difficulty=mean_df[sel],
        fe_adjust=fe_adj[sel],
        excluded=excluded,
    )


def _block_average(
    block_of,
    block_values,
    design,
    posn,
    diff_dm,
    y,
    rows,
    alpha,
    beta,
    delta,
    se_a,
    se_b,
    has_diff,
) -> None:
    """Fit the baseline model separately per block and average coefficients.

    Standard errors combine as sqrt(sum se^2) / n_blocks, treating block
    fits as independent.
    """
    blocks = list(block_values)
    k = len(blocks)
    acc_a = np.zeros(rows.shape[0])
    acc_b = np.zeros(rows.shape[0])
    acc_d = np.zeros(rows.shape[0])
    acc_va = np.zeros(rows.shape[0])
    acc_vb = np.zeros(rows.shape[0])
    for bval in blocks:
        cols = np.flatnonzero(np.asarray(block_of) == bval)
        pn = posn[cols]
        if np.unique(pn).shape[0] < 2:
            raise ZeroPositionVariance(f"block {bval!r} has a single position")
        sub_cols = [np.ones(cols.shape[0]), pn]
        if has_diff:
            sub_cols.append(diff_dm[cols])
        x = np.column_stack(sub_cols)
        coefs, sigma2, xtx_inv = _fit_block(y[:, cols], x)
        var = np.diag(xtx_inv)
        acc_a += coefs[:, 0]
        acc_b += coefs[:, 1]
        if has_diff:
            acc_d += coefs[:, 2]
        acc_va += sigma2 * var[0]
        acc_vb += sigma2 * var[1]
    alpha[rows] = acc_a / k
    beta[rows] = acc_b / k
    if has_diff:
        delta[rows] = acc_d / k
    se_a[rows] = np.sqrt(acc_va) / k
    se_b[rows] = np.sqrt(acc_vb) / k


def decompose_student(
    responses,
    student_id: int,
    difficulty=None,
    spec: str = "baseline",
    demean: str = "per_booklet",
    min_items: int = 10,
    min_positions: int = 3,
) -> SkillRow:
    """Decompose a single student (same engine as the cohort batch)."""
    idx = np.flatnonzero(responses.student_ids == student_id)
    if idx.shape[0] == 0:
        raise Empty(f"student {student_id} not in response matrix")
    i = int(idx[0])
    one = replace(
        responses,
        student_ids=responses.student_ids[i : i + 1],
        booklet=responses.booklet[i : i + 1],
        position=responses.position[i : i + 1],
        answered=responses.answered[i : i + 1],
        correct=responses.correct[i : i + 1],
    )
    est = decompose_cohort(
        one,
        difficulty=difficulty,
        spec=spec,
        demean=demean,
        min_items=min_items,
        min_positions=min_positions,
    )
    if est.n_students == 0:
        reason = est.excluded[0][1] if est.excluded else "unknown"
        if reason == "too_few_items":
            raise TooFewItems(f"student {student_id}: {responses.n_questions} items")
        raise ZeroPositionVariance(f"student {student_id}: {reason}")
    return SkillRow(
        student_id=int(est.student_ids[0]),
        spec=spec,
        alpha_hat=float(est.alpha_hat[0]),
        beta_hat=float(est.beta_hat[0]),
        delta_hat=float(est.delta_hat[0]),
        se_alpha=float(est.se_alpha[0]),
        se_beta=float(est.se_beta[0]),
        n_items=int(est.n_items[0]),
        mean_posnorm=float(est.mean_posnorm[0]),
        mean_difficulty=float(est.mean_difficulty[0]),
        fe_adjust=float(est.fe_adjust[0]),
    )


def closed_form_coefficients(pos_norm, correct) -> tuple[float, float]:
    """No-difficulty decomposition in closed form.

    beta_hat = sum_j w_j (c_j - mean(c)) with w_j = (p_j - mean(p)) /
    sum_j (p_j - mean(p))^2, and alpha_hat = mean(c) - beta_hat * mean(p);
    identical to OLS of ``correct`` on an intercept and ``pos_norm``.
    """
    p = np.asarray(pos_norm, dtype=float).ravel()
    c = np.asarray(correct, dtype=float).ravel()
    if p.shape != c.shape:
        raise DimensionMismatch("pos_norm and correct must have the same length")
    pc = p - p.mean()
    spp = float(pc @ pc)
    if spp <= 0.0:
        raise ZeroPositionVariance("positions show no variation")
    beta = float(pc @ (c - c.mean())) / spp
    alpha = float(c.mean()) - beta * float(p.mean())
    return alpha, beta


def implied_score(estimates: SkillEstimates) -> np.ndarray:
    """Fraction correct implied by the fitted coefficients.

    Exactly equals the observed fraction correct for specs fitted as one
    regression with an intercept (baseline, day_fe, subject_fe); the
    averaged specs only approximate it.
    """
    return (
        estimates.alpha_hat
        + estimates.beta_hat * estimates.mean_posnorm
        + estimates.delta_hat * estimates.mean_difficulty
        + estimates.fe_adjust
    )


@dataclass(frozen=True)
class LatentMoments:
    """Raw estimate dispersion versus sampling-noise-corrected dispersion."""

    sd_alpha_raw: float
    sd_beta_raw: float
    mean_se2_alpha: float
    mean_se2_beta: float
    sd_alpha_latent: float
    sd_beta_latent: float
    clamped_alpha: bool
    clamped_beta: bool
    corr_alpha_beta: float
    n: int


def latent_moments(estimates: SkillEstimates) -> LatentMoments:
    """Correct the raw dispersion of estimates for estimation noise.

    latent variance = sample variance of the estimates minus the average
    squared standard error, floored at zero (flagged as clamped).
    """
    if estimates.n_students < 2:
        raise Empty("need at least 2 students for moments")
    var_a = float(estimates.alpha_hat.var(ddof=1))
    var_b = float(estimates.beta_hat.var(ddof=1))
    mse_a = float((estimates.se_alpha**2).mean())
    mse_b = float((estimates.se_beta**2).mean())
    sig_a = var_a - mse_a
    sig_b = var_b - mse_b
    corr = float(np.corrcoef(estimates.alpha_hat, estimates.beta_hat)[0, 1])
    return LatentMoments(
        sd_alpha_raw=float(np.sqrt(var_a)),
        sd_beta_raw=float(np.sqrt(var_b)),
        mean_se2_alpha=mse_a,
        mean_se2_beta=mse_b,
        sd_alpha_latent=float(np.sqrt(max(sig_a, 0.0))),
        sd_beta_latent=float(np.sqrt(max(sig_b, 0.0))),
        clamped_alpha=sig_a <= 0.0,
        clamped_beta=sig_b <= 0.0,
        corr_alpha_beta=corr,
        n=estimates.n_students,
    )


def shrink_skill_estimates(
    estimates: SkillEstimates, moments: LatentMoments | None = None
) -> SkillEstimates:
    """Precision-weighted shrinkage of each student's estimates toward the mean.

    weight_i = signal_var / (signal_var + se_i^2) per skill, where
    signal_var is the noise-corrected variance from :func:`latent_moments`.
    A skill whose signal variance clamped to zero collapses to the plain
    mean (with a warning); if both skills are clamped the operation is
    meaningless and raises.
    """
    m = moments if moments is not None else latent_moments(estimates)
    if m.clamped_alpha and m.clamped_beta:
        raise DegenerateVariance(
            "both skills have zero noise-corrected variance; nothing to shrink"
        )

    def _shrink(values, ses, sd_latent, clamped, name):
        mean_v = values.mean()
        if clamped:
            warnings.warn(
                f"{name} signal variance clamped at zero; returning the mean",
                UserWarning,
            )
            return np.full_like(values, mean_v)
        sig = sd_latent**2
        w = np.clip(sig / (sig + ses**2), 0.0, 1.0)
        return w * values + (1.0 - w) * mean_v

    return replace(
        estimates,
        spec=estimates.spec + "+shrunk",
        alpha_hat=_shrink(
            estimates.alpha_hat, estimates.se_alpha, m.sd_alpha_latent, m.clamped_alpha, "ability"
        ),
        beta_hat=_shrink(
            estimates.beta_hat, estimates.se_beta, m.sd_beta_latent, m.clamped_beta, "endurance"
        ),
    )


@dataclass
class RetestReliability:
    """Cross-sitting correlations plus binned means for stability plots."""

    r_alpha: float
    r_beta: float
    n_matched: int
    skill: np.ndarray
    bin_index: np.ndarray
    mean_first: np.ndarray
    mean_second: np.ndarray
    bin_n: np.ndarray


def retest_reliability(
    first: SkillEstimates, second: SkillEstimates, n_bins: int = 100
) -> RetestReliability:
    """Correlate matched students' estimates across two sittings."""
    common, i0, i1 = np.intersect1d(
        first.student_ids, second.student_ids, return_indices=True
    )
    m = common.shape[0]
    if m < 30:
        raise TooFewMatched(f"only {m} matched students across sittings")
    r_alpha = float(np.corrcoef(first.alpha_hat[i0], second.alpha_hat[i1])[0, 1])
    r_beta = float(np.corrcoef(first.beta_hat[i0], second.beta_hat[i1])[0, 1])

    skills, bins, m0, m1, bn = [], [], [], [], []
    nb = min(n_bins, m)
    for name, a0, a1 in (
        ("ability", first.alpha_hat[i0], second.alpha_hat[i1]),
        ("endurance", first.beta_hat[i0], second.beta_hat[i1]),
    ):
        order = np.lexsort((common, a0))
        bin_of = np.arange(m) * nb // m
        for b in range(nb):
            sel = order[bin_of == b]
            skills.append(name)
            bins.append(b)
            m0.append(float(a0[sel].mean()))
            m1.append(float(a1[sel].mean()))
            bn.append(sel.shape[0])
    return RetestReliability(
        r_alpha=r_alpha,
        r_beta=r_beta,
        n_matched=m,
        skill=np.array(skills, dtype=object),
        bin_index=np.array(bins, dtype=np.int64),
        mean_first=np.array(m0),
        mean_second=np.array(m1),
        bin_n=np.array(bn, dtype=np.int64),
    )


def filter_estimates(
    estimates: SkillEstimates,
    drop_tails: str | None = None,
    drop_positive_endurance: bool = False,
) -> SkillEstimates:
    """Robustness sample filters.

    ``drop_tails`` removes students in the top or bottom decile
    ("decile") or quintile ("quintile") of either skill;
    ``drop_positive_endurance`` removes students with a positive
    endurance estimate.
    """
    mask = np.ones(estimates.n_students, dtype=bool)
    if drop_tails is not None:
        q = {"decile": 0.10, "quintile": 0.20}.get(drop_tails)
        if q is None:
            raise MethodUnknown(f"drop_tails must be 'decile' or 'quintile', got {drop_tails!r}")
        for arr in (estimates.alpha_hat, estimates.beta_hat):
            lo, hi = np.quantile(arr, [q, 1.0 - q])
            mask &= (arr >= lo) & (arr <= hi)
    if drop_positive_endurance:
        mask &= estimates.beta_hat <= 0.0
    return estimates.subset(mask)
