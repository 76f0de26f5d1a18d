"""Exam-level position effects from randomized booklet orderings.

Aggregates responses into exact (question, booklet) cell means and
estimates the average per-day performance decline ("mean endurance") two
ways: absorbing question fixed effects, and controlling for a
position-adjusted difficulty measure.  Also provides the direct
booklet-pair contrasts, subgroup splits, and a nonresponse-by-position
diagnostic.

Positions are normalized to [0, 1] within each day (first question 0,
last question 1), so every slope below reads as the accuracy change over
one full testing day.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import regress
from .errors import (
    DimensionMismatch,
    Empty,
    InsufficientBooklets,
    MissingDifficulty,
    NoPairs,
    NoWithinVariation,
)


@dataclass
class BookletPanel:
    """Cell means per (question, booklet): one row per cell actually observed."""

    question_ids: np.ndarray
    booklet: np.ndarray
    day: np.ndarray
    subject: np.ndarray
    position: np.ndarray  # raw 1-based position within the day
    pos_norm: np.ndarray
    fraction_correct: np.ndarray
    n_students: np.ndarray
    questions_per_day: int

    @property
    def n_cells(self) -> int:
        return self.question_ids.shape[0]

    @property
    def n_questions(self) -> int:
        return np.unique(self.question_ids).shape[0]

    @property
    def n_booklets(self) -> int:
        return np.unique(self.booklet).shape[0]

    def subset(self, mask: np.ndarray) -> "BookletPanel":
        return BookletPanel(
            question_ids=self.question_ids[mask],
            booklet=self.booklet[mask],
            day=self.day[mask],
            subject=self.subject[mask],
            position=self.position[mask],
            pos_norm=self.pos_norm[mask],
            fraction_correct=self.fraction_correct[mask],
            n_students=self.n_students[mask],
            questions_per_day=self.questions_per_day,
        )


def build_booklet_panel(responses, student_mask: np.ndarray | None = None) -> BookletPanel:
    """Exact (question, booklet) cell means from a response matrix.

    Unanswered questions count as incorrect.  ``student_mask`` restricts
    the aggregation to a subsample (used for holdout difficulty).
    """
    design = responses.design
    n = responses.n_students
    if student_mask is None:
        student_mask = np.ones(n, dtype=bool)
    else:
        student_mask = np.asarray(student_mask, dtype=bool)
        if student_mask.shape[0] != n:
            raise DimensionMismatch("student_mask length mismatch")
    if not student_mask.any():
        raise Empty("no students selected for panel aggregation")

    rows: list[tuple] = []
    for day in range(design.days):
        cols = np.flatnonzero(design.day_of == day)
        day_booklets = responses.booklet[:, day]
        for b in np.unique(day_booklets[student_mask]):
            cell_mask = student_mask & (day_booklets == b)
            m = int(cell_mask.sum())
            if m == 0:
                continue
            frac = responses.correct[cell_mask][:, cols].mean(axis=0)
            pos = design.position[b - 1, cols]
            for k, q in enumerate(cols):
                rows.append(
                    (
                        int(design.question_ids[q]),
                        int(b),
                        day,
                        design.subject_of[q],
                        int(pos[k]),
                        float(frac[k]),
                        m,
                    )
                )
    if not rows:
        raise Empty("no cells aggregated")
    rows.sort(key=lambda r: (r[0], r[1]))
    qid = np.array([r[0] for r in rows], dtype=np.int64)
    booklet = np.array([r[1] for r in rows], dtype=np.int64)
    day = np.array([r[2] for r in rows], dtype=np.int64)
    subject = np.array([r[3] for r in rows], dtype=object)
    position = np.array([r[4] for r in rows], dtype=np.int64)
    frac = np.array([r[5] for r in rows], dtype=float)
    n_students = np.array([r[6] for r in rows], dtype=np.int64)
    pos_norm = (position - 1.0) / (design.questions_per_day - 1.0)
    return BookletPanel(
        question_ids=qid,
        booklet=booklet,
        day=day,
        subject=subject,
        position=position,
        pos_norm=pos_norm,
        fraction_correct=frac,
        n_students=n_students,
        questions_per_day=design.questions_per_day,
    )


@dataclass(frozen=True)
class EnduranceEstimate:
    """A per-day position slope with its question-clustered standard error."""

    design_label: str
    beta_daily: float
    se: float
    n_questions: int
    n_cells: int
    r_squared: float | None = None
    intercept: float | None = None


def _require_booklets(panel: BookletPanel, what: str) -> None:
    if panel.n_booklets < 2:
        raise InsufficientBooklets(
            f"{what} needs >= 2 booklets, found {panel.n_booklets}"
        )


def mean_endurance_fe(panel: BookletPanel) -> EnduranceEstimate:
    """Average daily decline, absorbing a fixed effect per question.

    Weighted least squares on the cell panel with cell weights equal to
    the number of students behind each mean; standard errors clustered at
    the question level with degrees of freedom adjusted for the absorbed
    effects.
    """
    _require_booklets(panel, "question-fixed-effects estimator")
    x = regress.DesignMatrix(
        panel.pos_norm.reshape(-1, 1), ("pos_norm",), intercept_included=False
    )
    w = panel.n_students.astype(float)
    x_dm, y_dm = regress.absorb_fixed_effects(
        x, panel.fraction_correct, panel.question_ids, weights=w
    )
    if float((w * x_dm.values[:, 0] ** 2).sum()) <= 1e-14:
        raise NoWithinVariation("no within-question position variation")
    fit = regress.ols_fit(x_dm, y_dm, weights=w)
    n_questions = panel.n_questions
    se = regress.cluster_robust_se(
        fit, x_dm, panel.question_ids, extra_df=n_questions
    )
    return EnduranceEstimate(
        design_label="question_fe",
        beta_daily=float(fit.coefficients[0]),
        se=float(se[0]),
        n_questions=n_questions,
        n_cells=panel.n_cells,
        r_squared=fit.r_squared,
    )


def _difficulty_lookup(panel: BookletPanel, difficulty) -> np.ndarray:
    """Per-cell difficulty, demeaned across the distinct questions present."""
    if hasattr(difficulty, "question_ids"):
        ids = np.asarray(difficulty.question_ids)
        vals = np.asarray(difficulty.difficulty, dtype=float)
    else:
        vals = np.asarray(difficulty, dtype=float)
        ids = np.arange(vals.shape[0])
    order = np.argsort(ids)
    ids_sorted, vals_sorted = ids[order], vals[order]
    pos = np.searchsorted(ids_sorted, panel.question_ids)
    bad = (pos >= ids_sorted.shape[0]) | (
        ids_sorted[np.minimum(pos, ids_sorted.shape[0] - 1)] != panel.question_ids
    )
    if bad.any():
        missing = np.unique(panel.question_ids[bad])[:5]
        raise MissingDifficulty(f"no difficulty for questions {missing.tolist()}")
    cell_diff = vals_sorted[pos]
    # demean in question space (each distinct question once)
    uq, first = np.unique(panel.question_ids, return_index=True)
    return cell_diff - cell_diff[first].mean()


def mean_endurance_diffadj(panel: BookletPanel, difficulty) -> EnduranceEstimate:
    """Average daily decline controlling for question difficulty.

    Regresses cell means on normalized position and the demeaned
    difficulty of each question (no fixed effects), weighted by cell
    student counts, clustered at the question level.  ``difficulty`` is a
    difficulty table or an array indexed by question id.
    """
    _require_booklets(panel, "difficulty-adjusted estimator")
    diff_dm = _difficulty_lookup(panel, difficulty)
    x = regress.DesignMatrix(
        np.column_stack([np.ones(panel.n_cells), panel.pos_norm, diff_dm]),
        ("const", "pos_norm", "difficulty"),
        intercept_included=True,
    )
    w = panel.n_students.astype(float)
    fit = regress.ols_fit(x, panel.fraction_correct, weights=w)
    se = regress.cluster_robust_se(fit, x, panel.question_ids)
    return EnduranceEstimate(
        design_label="difficulty_adjusted",
        beta_daily=float(fit.coefficients[1]),
        se=float(se[1]),
        n_questions=panel.n_questions,
        n_cells=panel.n_cells,
        r_squared=fit.r_squared,
        intercept=float(fit.coefficients[0]),
    )


@dataclass
class PairDeltas:
    """Within-question booklet-pair contrasts, aggregated by position shift.

    For each question and unordered booklet pair the cells are ordered by
    ascending position (ties by booklet id), so ``delta_position >= 0``
    and ``mean_delta_fraction`` is the accuracy change when the question
    moves later by that many positions.
    """

    delta_position: np.ndarray
    mean_delta_fraction: np.ndarray
    n_pairs: np.ndarray
    slope_per_position: float
    intercept: float
    se_slope: float
    se_intercept: float
    n_pairs_total: int


def booklet_pair_deltas(panel: BookletPanel) -> PairDeltas:
    """Aggregate booklet-pair deltas and fit a pair-count-weighted line."""
    _require_booklets(panel, "booklet-pair contrasts")
    sums: dict[int, list] = {}
    total = 0
    order = np.lexsort((panel.booklet, panel.position, panel.question_ids))
    qid = panel.question_ids[order]
    pos = panel.position[order]
    frac = panel.fraction_correct[order]
    start = 0
    while start < qid.shape[0]:
        stop = start
        while stop < qid.shape[0] and qid[stop] == qid[start]:
            stop += 1
        for i in range(start, stop):
            for j in range(i + 1, stop):
                dp = int(pos[j] - pos[i])
                df = float(frac[j] - frac[i])
                acc = sums.setdefault(dp, [0.0, 0])
                acc[0] += df
                acc[1] += 1
                total += 1
        start = stop
    if total == 0:
        raise NoPairs("no booklet pairs available")
    dpos = np.array(sorted(sums), dtype=np.int64)
    mean_df = np.array([sums[d][0] / sums[d][1] for d in dpos])
    counts = np.array([sums[d][1] for d in dpos], dtype=np.int64)
    if np.unique(dpos).shape[0] < 2:
        raise NoPairs("position shifts are all identical; slope undefined")
    x = regress.DesignMatrix(
        np.column_stack([np.ones(dpos.shape[0]), dpos.astype(float)]),
        ("const", "delta_position"),
        intercept_included=True,
    )
    fit = regress.ols_fit(x, mean_df, weights=counts.astype(float))
    return PairDeltas(
        delta_position=dpos,
        mean_delta_fraction=mean_df,
        n_pairs=counts,
        slope_per_position=float(fit.coefficients[1]),
        intercept=float(fit.coefficients[0]),
        se_slope=float(fit.se_homoskedastic[1]),
        se_intercept=float(fit.se_homoskedastic[0]),
        n_pairs_total=total,
    )


def subgroup_position_effects(
    panel: BookletPanel, partition: dict[int, str]
) -> dict[str, EnduranceEstimate]:
    """Question-fixed-effects estimates within each partition label.

    ``partition`` maps question id -> label; questions missing from the
    map are ignored.  Raises when a label lacks within-question position
    variation on at least two questions.
    """
    labels = np.array(
        [partition.get(int(q), None) for q in panel.question_ids], dtype=object
    )
    out: dict[str, EnduranceEstimate] = {}
    for label in sorted({l for l in labels if l is not None}):
        sub = panel.subset(labels == label)
        uq, counts = np.unique(sub.question_ids, return_counts=True)
        n_varying = 0
        for q in uq[counts > 1]:
            p = sub.position[sub.question_ids == q]
            if np.unique(p).shape[0] > 1:
                n_varying += 1
        if n_varying < 2:
            raise NoWithinVariation(
                f"label {label!r} has {n_varying} questions with position variation"
            )
        est = mean_endurance_fe(sub)
        out[label] = EnduranceEstimate(
            design_label=f"question_fe[{label}]",
            beta_daily=est.beta_daily,
            se=est.se,
            n_questions=est.n_questions,
            n_cells=est.n_cells,
            r_squared=est.r_squared,
        )
    return out


def partition_by_median(
    question_ids, values, labels: tuple[str, str] = ("low", "high")
) -> dict[int, str]:
    """Split questions at the median of ``values`` (ties go low)."""
    ids = np.asarray(question_ids)
    vals = np.asarray(values, dtype=float)
    if ids.shape[0] != vals.shape[0]:
        raise DimensionMismatch("question_ids and values length mismatch")
    med = np.median(vals)
    return {
        int(q): (labels[0] if v <= med else labels[1]) for q, v in zip(ids, vals)
    }


def partition_by_half_day(panel: BookletPanel) -> dict[int, str]:
    """Classify questions by whether their mean position falls in the first
    or second half of the testing day."""
    uq = np.unique(panel.question_ids)
    mean_pos = np.array(
        [panel.position[panel.question_ids == q].mean() for q in uq]
    )
    cut = (panel.questions_per_day + 1) / 2.0
    return {
        int(q): ("first_half" if p <= cut else "second_half")
        for q, p in zip(uq, mean_pos)
    }


@dataclass
class NonresponseByPosition:
    """Share of unanswered questions by (day, position) with per-day line fits."""

    day: np.ndarray
    position: np.ndarray
    fraction_unanswered: np.ndarray
    fits: dict[int, tuple[float, float]]  # day -> (intercept, slope per position)


def nonresponse_by_position(responses) -> NonresponseByPosition:
    """Nonresponse diagnostic: unanswered share by position, per day."""
    design = responses.design
    qpd = design.questions_per_day
    n = responses.n_students
    if n == 0:
        raise Empty("no students")
    days, positions, fracs = [], [], []
    fits: dict[int, tuple[float, float]] = {}
    for day in range(design.days):
        cols = np.flatnonzero(design.day_of == day)
        pos = responses.position[:, cols].ravel().astype(np.int64)
        ans = responses.answered[:, cols].ravel().astype(float)
        answered_count = np.bincount(pos - 1, weights=ans, minlength=qpd)
        total_count = np.bincount(pos - 1, minlength=qpd)
        frac_unans = 1.0 - answered_count / np.maximum(total_count, 1)
        days.extend([day] * qpd)
        positions.extend(range(1, qpd + 1))
        fracs.extend(frac_unans.tolist())
        x = regress.DesignMatrix(
            np.column_stack([np.ones(qpd), np.arange(1, qpd + 1, dtype=float)]),
            ("const", "position"),
            intercept_included=True,
        )
        fit = regress.ols_fit(x, frac_unans)
        fits[day] = (float(fit.coefficients[0]), float(fit.coefficients[1]))
    return NonresponseByPosition(
        day=np.array(days, dtype=np.int64),
        position=np.array(positions, dtype=np.int64),
        fraction_unanswered=np.array(fracs, dtype=float),
        fits=fits,
    )
