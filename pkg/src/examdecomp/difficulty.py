"""Position-adjusted question difficulty.

A question's raw share of correct answers confounds intrinsic hardness
with where booklets happened to place it.  Every method here returns the
expected fraction correct *at the first position of the day* (higher =
easier):

    difficulty_j = fraction_correct_raw_j - effect_j * avg_position_j

where ``avg_position_j`` is the student-count-weighted average position
of the question across booklets and ``effect_j`` is a per-position
accuracy slope whose construction is what distinguishes the methods:

* ``raw``             - no adjustment (effect 0)
* ``pooled``          - one slope for all questions (question-FE design)
* ``item_specific``   - per-question slope across booklet cells
* ``shrinkage``       - item-specific slopes shrunk toward their mean
* ``by_median_split`` - pooled slopes split at median raw difficulty
* ``by_subject``      - pooled slopes per subject
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import regress
from .errors import (
    DimensionMismatch,
    InsufficientBooklets,
    MethodUnknown,
    NoWithinVariation,
)
from .position_effects import BookletPanel, build_booklet_panel

METHODS = (
    "raw",
    "pooled",
    "item_specific",
    "shrinkage",
    "by_median_split",
    "by_subject",
)


class DegenerateVarianceWarning(UserWarning):
    """Estimated slope dispersion no larger than its sampling noise."""


@dataclass
class DifficultyTable:
    """Per-question difficulty on the expected-fraction-correct scale."""

    method: str
    question_ids: np.ndarray
    fraction_correct_raw: np.ndarray
    avg_position: np.ndarray
    position_effect_used: np.ndarray  # per raw position
    difficulty: np.ndarray
    fallback: np.ndarray  # True where a per-item slope fell back to pooled
    n_students_used: int

    @property
    def n_questions(self) -> int:
        return self.question_ids.shape[0]

    def values_for(self, question_ids) -> np.ndarray:
        """Difficulty values aligned to the requested question ids."""
        idx = {int(q): i for i, q in enumerate(self.question_ids)}
        try:
            take = [idx[int(q)] for q in np.asarray(question_ids).ravel()]
        except KeyError as exc:
            raise DimensionMismatch(f"question id {exc} not in difficulty table")
        return self.difficulty[take]


def holdout_mask(student_ids, fraction: float = 0.5, salt: int = 0) -> np.ndarray:
    """Deterministic subsample membership by hashing student ids.

    Returns True for students in the difficulty-estimation half.  Uses a
    splitmix64-style integer hash, so membership is stable across runs and
    platforms and does not depend on ordering.
    """
    if not 0.0 < fraction <= 1.0:
        raise DimensionMismatch("holdout fraction must be in (0, 1]")
    x = np.asarray(student_ids, dtype=np.uint64) ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(
        0xFFFFFFFFFFFFFFFF
    )
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(
        0xFFFFFFFFFFFFFFFF
    )
    x = x ^ (x >> np.uint64(31))
    return (x.astype(np.float64) / 2.0**64) < fraction


def _pooled_slope(panel: BookletPanel) -> float:
    """One per-raw-position slope for the whole panel (question FE design)."""
    x = regress.DesignMatrix(
        panel.position.astype(float).reshape(-1, 1), ("position",), intercept_included=False
    )
    w = panel.n_students.astype(float)
    x_dm, y_dm = regress.absorb_fixed_effects(
        x, panel.fraction_correct, panel.question_ids, weights=w
    )
    if float((w * x_dm.values[:, 0] ** 2).sum()) <= 1e-14:
        raise NoWithinVariation("no within-question position variation")
    fit = regress.ols_fit(x_dm, y_dm, weights=w)
    return float(fit.coefficients[0])


def _item_slopes(panel: BookletPanel):
    """Per-question slopes across booklet cells; NaN where unidentified."""
    uq = np.unique(panel.question_ids)
    slopes = np.full(uq.shape[0], np.nan)
    ses = np.full(uq.shape[0], np.nan)
    for i, q in enumerate(uq):
        mask = panel.question_ids == q
        pos = panel.position[mask].astype(float)
        if np.unique(pos).shape[0] < 2:
            continue
        x = regress.DesignMatrix(
            np.column_stack([np.ones(pos.shape[0]), pos]),
            ("const", "position"),
            intercept_included=True,
        )
        fit = regress.ols_fit(
            x, panel.fraction_correct[mask], weights=panel.n_students[mask].astype(float)
        )
        slopes[i] = fit.coefficients[1]
        ses[i] = fit.se_homoskedastic[1]
    return uq, slopes, ses


def shrink_position_effects(effects, ses):
    """Empirical-Bayes shrinkage of noisy per-item slopes toward their mean.

    weight_j = (Var[effects] - mean(ses^2)) / ((Var[effects] - mean(ses^2)) + ses_j^2),
    clamped to [0, 1].  When the slope dispersion does not exceed the
    average sampling variance the signal is indistinguishable from noise:
    every item gets the plain mean back and a warning is issued.

    Returns (shrunk_effects, weights, mean_effect).
    """
    eff = np.asarray(effects, dtype=float)
    se = np.asarray(ses, dtype=float)
    if eff.shape != se.shape:
        raise DimensionMismatch("effects and ses must have the same shape")
    if eff.shape[0] < 2:
        raise DimensionMismatch("need at least 2 effects to shrink")
    mean_eff = float(eff.mean())
    signal = float(eff.var(ddof=1)) - float((se**2).mean())
    if signal <= 0.0:
        warnings.warn(
            "slope dispersion does not exceed sampling noise; returning the "
            "mean effect for every item",
            DegenerateVarianceWarning,
        )
        return np.full_like(eff, mean_eff), np.zeros_like(eff), mean_eff
    weights = np.clip(signal / (signal + se**2), 0.0, 1.0)
    return weights * eff + (1.0 - weights) * mean_eff, weights, mean_eff


def estimate_difficulty(
    responses,
    method: str = "pooled",
    student_mask: np.ndarray | None = None,
    panel: BookletPanel | None = None,
) -> DifficultyTable:
    """Estimate position-adjusted difficulty for every question.

    ``student_mask`` restricts estimation to a subsample (see
    :func:`holdout_mask`); pass ``panel`` to reuse a prebuilt aggregation.
    All methods except ``raw`` require at least two booklets.
    """
    if method not in METHODS:
        raise MethodUnknown(f"method must be one of {METHODS}, got {method!r}")
    if panel is None:
        panel = build_booklet_panel(responses, student_mask=student_mask)
    n_used = (
        int(np.asarray(student_mask, dtype=bool).sum())
        if student_mask is not None
        else responses.n_students
    )

    uq, first_idx = np.unique(panel.question_ids, return_index=True)
    j = uq.shape[0]
    wsum = np.zeros(j)
    frac_raw = np.zeros(j)
    avg_pos = np.zeros(j)
    codes = np.searchsorted(uq, panel.question_ids)
    w = panel.n_students.astype(float)
    np.add.at(wsum, codes, w)
    np.add.at(frac_raw, codes, w * panel.fraction_correct)
    np.add.at(avg_pos, codes, w * panel.position)
    frac_raw /= wsum
    avg_pos /= wsum

    fallback = np.zeros(j, dtype=bool)
    if method == "raw":
        effect = np.zeros(j)
    elif method == "pooled":
        _require_two_booklets(panel)
        effect = np.full(j, _pooled_slope(panel))
    elif method == "item_specific":
        _require_two_booklets(panel)
        pooled = _pooled_slope(panel)
        _, slopes, _ = _item_slopes(panel)
        fallback = np.isnan(slopes)
        effect = np.where(fallback, pooled, slopes)
    elif method == "shrinkage":
        _require_two_booklets(panel)
        pooled = _pooled_slope(panel)
        _, slopes, ses = _item_slopes(panel)
        fallback = np.isnan(slopes)
        ok = ~fallback
        effect = np.full(j, pooled)
        if ok.sum() >= 2:
            shrunk, _, _ = shrink_position_effects(slopes[ok], ses[ok])
            effect[ok] = shrunk
        elif ok.any():
            effect[ok] = slopes[ok]
    elif method == "by_median_split":
        _require_two_booklets(panel)
        med = np.median(frac_raw)
        low = frac_raw <= med
        effect = np.empty(j)
        for grp_mask in (low, ~low):
            grp_q = set(uq[grp_mask].tolist())
            sub = panel.subset(
                np.array([int(q) in grp_q for q in panel.question_ids])
            )
            effect[grp_mask] = _pooled_slope(sub)
    else:  # by_subject
        _require_two_booklets(panel)
        subj_by_q = panel.subject[first_idx]
        effect = np.empty(j)
        for s in sorted(set(subj_by_q.tolist())):
            grp_mask = subj_by_q == s
            sub = panel.subset(panel.subject == s)
            effect[grp_mask] = _pooled_slope(sub)

    difficulty = frac_raw - effect * avg_pos
    return DifficultyTable(
        method=method,
        question_ids=uq,
        fraction_correct_raw=frac_raw,
        avg_position=avg_pos,
        position_effect_used=effect,
        difficulty=difficulty,
        fallback=fallback,
        n_students_used=n_used,
    )


def _require_two_booklets(panel: BookletPanel) -> None:
    if panel.n_booklets < 2:
        raise InsufficientBooklets(
            f"position adjustment needs >= 2 booklets, found {panel.n_booklets}"
        )


def estimate_all_methods(
    responses, student_mask: np.ndarray | None = None
) -> dict[str, DifficultyTable]:
    """All six difficulty tables from one shared panel aggregation."""
    panel = build_booklet_panel(responses, student_mask=student_mask)
    out: dict[str, DifficultyTable] = {}
    for m in METHODS:
        out[m] = estimate_difficulty(
            responses, method=m, student_mask=student_mask, panel=panel
        )
    return out
