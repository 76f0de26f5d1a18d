"""Synthetic randomized-booklet exam generator.

Produces the four artefacts the estimation modules consume:

* an exam design: questions grouped into days and subject blocks, with
  several booklets that reorder questions uniformly at random *within*
  each subject block (booklet 1 keeps the canonical order),
* a latent student population with two skills: a baseline accuracy level
  ("ability") and a linear per-day slope on normalized question position
  ("endurance"), drawn from a configurable bivariate normal,
* binary response matrices under a linear probability model (default) or
  a three-parameter logistic item model,
* wage/enrollment style outcomes driven by the latent skills, plus
  repeated sittings with transient skill shocks for reliability studies.

Randomness uses counter-based Philox streams keyed by the master seed and
a purpose path, so every artefact is reproducible bit for bit given
(seed, config) regardless of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .errors import DimensionMismatch, ModelMismatch, NonFiniteInput, ParamInvalid

DEFAULT_SUBJECT_POOL = (
    "language_arts",
    "social_science",
    "natural_science",
    "math",
)


def keyed_rng(seed: int, *path) -> np.random.Generator:
    """A Philox generator keyed by (seed, path).

    Path components may be ints or strings; strings are hashed with a
    stable CRC so streams do not depend on interpreter hash seeds.
    """
    import zlib

    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in path:
        if isinstance(part, str):
            entropy.append(zlib.crc32(part.encode("utf-8")))
        else:
            entropy.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# exam design


@dataclass(frozen=True)
class DesignConfig:
    days: int = 2
    questions_per_day: int = 90
    booklets: int = 4
    subjects_per_day: int = 2
    subject_labels: tuple[str, ...] | None = None
    length_words_range: tuple[int, int] = (40, 280)

    def validate(self) -> None:
        if self.days < 1 or self.questions_per_day < 2 or self.booklets < 1:
            raise ParamInvalid(
                "need days >= 1, questions_per_day >= 2, booklets >= 1"
            )
        if not 1 <= self.subjects_per_day <= self.questions_per_day:
            raise ParamInvalid("subjects_per_day out of range")
        n_subjects = self.days * self.subjects_per_day
        if self.subject_labels is not None and len(self.subject_labels) != n_subjects:
            raise ParamInvalid(
                f"need {n_subjects} subject labels, got {len(self.subject_labels)}"
            )
        lo, hi = self.length_words_range
        if lo < 1 or hi < lo:
            raise ParamInvalid("length_words_range must satisfy 1 <= lo <= hi")


@dataclass(frozen=True)
class ExamDesign:
    """Question layout of one exam.

    ``position[b, j]`` is the 1-based position of question ``j`` within its
    day when sitting booklet ``b + 1``.  Question ids are dense integers;
    day ``d`` owns ids ``d * questions_per_day`` through
    ``(d + 1) * questions_per_day - 1`` in canonical order.
    """

    days: int
    questions_per_day: int
    n_booklets: int
    question_ids: np.ndarray
    day_of: np.ndarray
    subject_of: np.ndarray
    length_words: np.ndarray
    position: np.ndarray

    @property
    def n_questions(self) -> int:
        return self.question_ids.shape[0]

    def pos_norm(self) -> np.ndarray:
        """Normalized positions in [0, 1], shape (booklets, questions)."""
        return (self.position.astype(float) - 1.0) / (self.questions_per_day - 1.0)

    def ordering(self, booklet: int, day: int) -> np.ndarray:
        """Question ids of one day in the order booklet ``booklet`` shows them."""
        mask = self.day_of == day
        ids = self.question_ids[mask]
        pos = self.position[booklet - 1, mask]
        return ids[np.argsort(pos)]


def build_design(config: DesignConfig | None = None, seed: int = 0) -> ExamDesign:
    """Build an exam design with within-subject-block booklet reorderings.

    Booklet 1 is the canonical (identity) ordering.  Every other booklet
    draws an independent uniform permutation of the questions inside each
    subject block; block boundaries and the subject sequence are shared by
    all booklets.
    """
    cfg = config or DesignConfig()
    cfg.validate()
    d, qpd, b = cfg.days, cfg.questions_per_day, cfg.booklets
    j_total = d * qpd

    question_ids = np.arange(j_total, dtype=np.int64)
    day_of = question_ids // qpd

    if cfg.subject_labels is not None:
        labels = tuple(cfg.subject_labels)
    else:
        n_subjects = d * cfg.subjects_per_day
        pool = list(DEFAULT_SUBJECT_POOL)
        while len(pool) < n_subjects:
            pool.append(f"subject_{len(pool)}")
        labels = tuple(pool[:n_subjects])

    subject_of = np.empty(j_total, dtype=object)
    block_of = np.empty(j_total, dtype=np.int64)
    for day in range(d):
        day_slots = np.arange(qpd)
        blocks = np.array_split(day_slots, cfg.subjects_per_day)
        for s, block in enumerate(blocks):
            ids = day * qpd + block
            subject_of[ids] = labels[day * cfg.subjects_per_day + s]
            block_of[ids] = day * cfg.subjects_per_day + s

    position = np.empty((b, j_total), dtype=np.int16)
    within_day_slot = question_ids % qpd  # canonical slot, 0-based
    position[0] = within_day_slot + 1
    rng = keyed_rng(seed, "design")
    for bk in range(1, b):
        pos_bk = np.empty(j_total, dtype=np.int16)
        for blk in np.unique(block_of):
            ids = np.flatnonzero(block_of == blk)
            slots = within_day_slot[ids] + 1  # the block's slots within the day
            pos_bk[ids] = slots[rng.permutation(ids.shape[0])]
        position[bk] = pos_bk

    lo, hi = cfg.length_words_range
    length_words = keyed_rng(seed, "length").integers(lo, hi + 1, size=j_total)

    return ExamDesign(
        days=d,
        questions_per_day=qpd,
        n_booklets=b,
        question_ids=question_ids,
        day_of=day_of,
        subject_of=subject_of,
        length_words=length_words.astype(np.int64),
        position=position,
    )


# ---------------------------------------------------------------------------
# latent population


@dataclass(frozen=True)
class LatentConfig:
    n_students: int = 20_000
    mean_alpha: float = 0.45
    sd_alpha: float = 0.132
    mean_beta: float = -0.058
    sd_beta: float = 0.088
    # Default latent correlation is negative so the simulated exam
    # reproduces the empirical pattern that later questions are less
    # predictive of ability-driven outcomes; set to 0 for independence.
    corr_alpha_beta: float = -0.3
    alpha_bounds: tuple[float, float] = (0.05, 0.95)
    # flag name -> prevalence, and additive (ability, endurance) shifts
    flags: dict[str, float] = field(default_factory=dict)
    shifts: dict[str, tuple[float, float]] = field(default_factory=dict)
    n_covariates: int = 2

    def validate(self) -> None:
        if self.n_students < 1:
            raise ParamInvalid("n_students must be positive")
        if self.sd_alpha < 0 or self.sd_beta < 0:
            raise ParamInvalid("latent standard deviations must be non-negative")
        if not -1.0 < self.corr_alpha_beta < 1.0:
            raise ParamInvalid("corr_alpha_beta must lie strictly inside (-1, 1)")
        lo, hi = self.alpha_bounds
        if not lo < hi:
            raise ParamInvalid("alpha_bounds must be increasing")
        for name, p in self.flags.items():
            if not 0.0 <= p <= 1.0:
                raise ParamInvalid(f"prevalence for flag {name!r} must be in [0, 1]")
        for name in self.shifts:
            if name not in self.flags:
                raise ParamInvalid(f"shift given for undeclared flag {name!r}")
        if self.n_covariates < 0:
            raise ParamInvalid("n_covariates must be non-negative")


@dataclass(frozen=True)
class LatentPopulation:
    student_ids: np.ndarray
    alpha_true: np.ndarray
    beta_true: np.ndarray
    flags: dict[str, np.ndarray]
    covariates: np.ndarray
    alpha_bounds: tuple[float, float] = (0.05, 0.95)

    @property
    def n_students(self) -> int:
        return self.student_ids.shape[0]

    def with_skills(self, alpha: np.ndarray, beta: np.ndarray) -> "LatentPopulation":
        return replace(self, alpha_true=alpha, beta_true=beta)


def draw_population(config: LatentConfig | None = None, seed: int = 0) -> LatentPopulation:
    """Draw latent skills, group flags and covariates for a cohort.

    Skills come from a bivariate normal; flag-specific additive shifts are
    applied before the ability level is clamped into ``alpha_bounds``.
    """
    cfg = config or LatentConfig()
    cfg.validate()
    n = cfg.n_students
    rng = keyed_rng(seed, "latent")
    z = rng.standard_normal((n, 2))
    rho = cfg.corr_alpha_beta
    alpha = cfg.mean_alpha + cfg.sd_alpha * z[:, 0]
    beta = cfg.mean_beta + cfg.sd_beta * (
        rho * z[:, 0] + np.sqrt(1.0 - rho**2) * z[:, 1]
    )

    flags: dict[str, np.ndarray] = {}
    for name in cfg.flags:
        draw = keyed_rng(seed, "flag", name).random(n)
        mask = draw < cfg.flags[name]
        flags[name] = mask
        d_alpha, d_beta = cfg.shifts.get(name, (0.0, 0.0))
        alpha = alpha + d_alpha * mask
        beta = beta + d_beta * mask

    lo, hi = cfg.alpha_bounds
    alpha = np.clip(alpha, lo, hi)

    covariates = keyed_rng(seed, "covariates").standard_normal((n, cfg.n_covariates))
    return LatentPopulation(
        student_ids=np.arange(n, dtype=np.int64),
        alpha_true=alpha,
        beta_true=beta,
        flags=flags,
        covariates=covariates,
        alpha_bounds=cfg.alpha_bounds,
    )


def draw_difficulty(n_questions: int, sd: float = 0.10, seed: int = 0) -> np.ndarray:
    """Exactly mean-zero per-question easiness shifts (+ = easier)."""
    if sd < 0:
        raise ParamInvalid("difficulty sd must be non-negative")
    d = keyed_rng(seed, "difficulty").standard_normal(n_questions) * sd
    return d - d.mean()


# ---------------------------------------------------------------------------
# responses


@dataclass(frozen=True)
class ItemParams3PL:
    """Per-question three-parameter logistic item parameters."""

    discrimination: np.ndarray
    location: np.ndarray
    guessing: np.ndarray

    def validate(self, n_questions: int) -> None:
        for name, arr in (
            ("discrimination", self.discrimination),
            ("location", self.location),
            ("guessing", self.guessing),
        ):
            a = np.asarray(arr, dtype=float)
            if a.shape != (n_questions,):
                raise ParamInvalid(f"{name} must have shape ({n_questions},)")
            if not np.isfinite(a).all():
                raise NonFiniteInput(f"{name} contains NaN or infinity")
        if (np.asarray(self.discrimination) <= 0).any():
            raise ParamInvalid("discrimination must be strictly positive")
        g = np.asarray(self.guessing)
        if (g < 0).any() or (g >= 1).any():
            raise ParamInvalid("guessing must lie in [0, 1)")


@dataclass(frozen=True)
class ResponseConfig:
    model: str = "linear"
    difficulty_loading: float = 1.0
    # logit-scale (intercept, slope on pos_norm) for skipping a question
    nonresponse: tuple[float, float] | None = None
    # endurance slope multipliers for above/below-median easiness questions
    easy_multiplier: float = 1.0
    hard_multiplier: float = 1.0
    item_params: ItemParams3PL | None = None

    def validate(self) -> None:
        if self.model not in ("linear", "three_pl"):
            raise ParamInvalid(f"unknown response model {self.model!r}")


@dataclass
class ResponseMatrix:
    """Dense (student x question) response data for one sitting.

    Unanswered questions are recorded with ``answered`` False and count as
    incorrect in ``correct``.  ``position`` is 1-based within each day.
    """

    design: ExamDesign
    student_ids: np.ndarray
    booklet: np.ndarray  # (n, days), booklet ids 1..B
    position: np.ndarray  # (n, J) int16
    answered: np.ndarray  # (n, J) bool
    correct: np.ndarray  # (n, J) bool
    n_clamped_low: int = 0
    n_clamped_high: int = 0

    @property
    def n_students(self) -> int:
        return self.student_ids.shape[0]

    @property
    def n_questions(self) -> int:
        return self.design.n_questions

    def pos_norm(self) -> np.ndarray:
        return (self.position.astype(float) - 1.0) / (self.design.questions_per_day - 1.0)

    def fraction_correct(self) -> np.ndarray:
        """Share of all exam questions answered correctly, per student."""
        return self.correct.mean(axis=1)


def three_pl_prob(theta, discrimination, location, guessing) -> np.ndarray:
    """Three-parameter logistic response probability.

    p = c + (1 - c) / (1 + exp(-a * (theta - b))), with a > 0 and
    0 <= c < 1.  As theta falls the probability approaches the guessing
    floor c; as theta grows it approaches 1.
    """
    theta = np.asarray(theta, dtype=float)
    a = np.asarray(discrimination, dtype=float)
    b = np.asarray(location, dtype=float)
    c = np.asarray(guessing, dtype=float)
    if (a <= 0).any():
        raise ParamInvalid("discrimination must be strictly positive")
    if (c < 0).any() or (c >= 1).any():
        raise ParamInvalid("guessing must lie in [0, 1)")
    out = special.expit(a * (theta - b))
    return c + (1.0 - c) * out


def _positions_for(design: ExamDesign, booklet: np.ndarray) -> np.ndarray:
    bidx = booklet[:, design.day_of] - 1  # (n, J)
    return design.position[bidx, np.arange(design.n_questions)[None, :]]


def simulate_responses(
    design: ExamDesign,
    population: LatentPopulation,
    difficulty_true: np.ndarray,
    config: ResponseConfig | None = None,
    seed: int = 0,
    stream: tuple = (),
) -> ResponseMatrix:
    """Draw one sitting of binary responses.

    Linear model: P(correct) = clamp_[0,1](ability + endurance * pos_norm
    + loading * difficulty), with clamp events counted on the result.
    Booklet assignment is balanced: each day every booklet goes to an
    equal share of students (up to a remainder of one), with the pairing
    shuffled independently per day.  ``stream`` namespaces the random
    draws (used for repeated sittings).
    """
    cfg = config or ResponseConfig()
    cfg.validate()
    diff = np.asarray(difficulty_true, dtype=float).ravel()
    if diff.shape[0] != design.n_questions:
        raise DimensionMismatch(
            f"{diff.shape[0]} difficulty values for {design.n_questions} questions"
        )
    if not np.isfinite(diff).all():
        raise NonFiniteInput("difficulty_true contains NaN or infinity")

    n = population.n_students
    j = design.n_questions
    rng_booklet = keyed_rng(seed, "booklets", *stream)
    balanced = np.resize(np.arange(1, design.n_booklets + 1, dtype=np.int16), n)
    booklet = np.empty((n, design.days), dtype=np.int16)
    for day in range(design.days):
        booklet[:, day] = balanced[rng_booklet.permutation(n)]
    pos = _positions_for(design, booklet)
    posn = (pos.astype(float) - 1.0) / (design.questions_per_day - 1.0)

    alpha = population.alpha_true[:, None]
    beta = population.beta_true[:, None]

    if cfg.easy_multiplier != 1.0 or cfg.hard_multiplier != 1.0:
        med = np.median(diff)
        mult = np.where(diff > med, cfg.easy_multiplier, cfg.hard_multiplier)[None, :]
    else:
        mult = 1.0

    n_lo = n_hi = 0
    if cfg.model == "linear":
        p = alpha + beta * posn * mult + cfg.difficulty_loading * diff[None, :]
        n_lo = int((p < 0.0).sum())
        n_hi = int((p > 1.0).sum())
        np.clip(p, 0.0, 1.0, out=p)
    else:  # three_pl
        if cfg.item_params is None:
            raise ModelMismatch("three_pl model requested without item parameters")
        cfg.item_params.validate(j)
        sd_a = float(population.alpha_true.std())
        scale = sd_a if sd_a > 0 else 1.0
        theta = (population.alpha_true[:, None] - population.alpha_true.mean()) / scale
        theta = theta + (beta / scale) * posn * mult
        p = three_pl_prob(
            theta,
            np.asarray(cfg.item_params.discrimination)[None, :],
            np.asarray(cfg.item_params.location)[None, :],
            np.asarray(cfg.item_params.guessing)[None, :],
        )

    u = keyed_rng(seed, "responses", *stream).random((n, j))
    correct = u < p

    if cfg.nonresponse is not None:
        a0, b0 = cfg.nonresponse
        p_skip = special.expit(a0 + b0 * posn)
        u2 = keyed_rng(seed, "nonresponse", *stream).random((n, j))
        answered = u2 >= p_skip
        correct = correct & answered
    else:
        answered = np.ones((n, j), dtype=bool)

    return ResponseMatrix(
        design=design,
        student_ids=population.student_ids.copy(),
        booklet=booklet,
        position=pos.astype(np.int16),
        answered=answered,
        correct=correct,
        n_clamped_low=n_lo,
        n_clamped_high=n_hi,
    )


# ---------------------------------------------------------------------------
# outcomes


@dataclass(frozen=True)
class OutcomeConfig:
    psi_ability: float = 0.154
    psi_endurance: float = 0.054
    sigma_wage: float = 0.5
    wage_const: float = 2.0
    lambda_controls: tuple[float, ...] | None = None
    n_occupations: int = 50
    n_employers: int = 400
    n_industries: int = 15
    n_degrees: int = 30
    assignment_noise: float = 0.5
    # cross-occupation gradient of the endurance return: occupations at
    # wage-rank percentile q pay psi_endurance * (1 + gradient * (q - 1/2))
    occupation_endurance_gradient: float = 0.0
    enroll_threshold: float = 0.0
    enroll_noise: float = 0.5
    cq_ability: float = 0.10
    cq_endurance: float = 0.04
    cq_noise: float = 0.30

    def validate(self, n_covariates: int) -> None:
        for name, v in (
            ("n_occupations", self.n_occupations),
            ("n_employers", self.n_employers),
            ("n_industries", self.n_industries),
            ("n_degrees", self.n_degrees),
        ):
            if v < 1:
                raise ParamInvalid(f"{name} must be positive")
        if self.sigma_wage < 0 or self.assignment_noise < 0 or self.enroll_noise < 0:
            raise ParamInvalid("noise scales must be non-negative")
        if self.lambda_controls is not None and len(self.lambda_controls) != n_covariates:
            raise ParamInvalid(
                f"lambda_controls needs {n_covariates} entries, got {len(self.lambda_controls)}"
            )


@dataclass
class OutcomePanel:
    student_ids: np.ndarray
    log_wage: np.ndarray
    enrolled: np.ndarray
    college_quality: np.ndarray
    employer_id: np.ndarray
    occupation_id: np.ndarray
    industry_id: np.ndarray
    degree_id: np.ndarray
    controls: np.ndarray
    control_labels: tuple[str, ...]

    @property
    def n_students(self) -> int:
        return self.student_ids.shape[0]

    def outcome(self, label: str) -> np.ndarray:
        table = {
            "log_wage": self.log_wage,
            "enrolled": self.enrolled.astype(float),
            "college_quality": self.college_quality,
        }
        if label not in table:
            raise DimensionMismatch(f"unknown outcome {label!r}")
        return table[label]


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = float(x.std())
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def _noisy_rank_groups(
    index: np.ndarray, noise_sd: float, n_groups: int, rng: np.random.Generator
) -> np.ndarray:
    noisy = index + noise_sd * rng.standard_normal(index.shape[0])
    order = np.argsort(noisy, kind="stable")
    ranks = np.empty_like(order)
    ranks[order] = np.arange(order.shape[0])
    return (ranks * n_groups // order.shape[0]).astype(np.int64)


def simulate_outcomes(
    population: LatentPopulation,
    config: OutcomeConfig | None = None,
    seed: int = 0,
) -> OutcomePanel:
    """Latent-skill-driven outcomes.

    log wage is linear in the z-scored latent skills plus controls and
    normal noise; enrollment thresholds a noisy version of the same skill
    index; employer/occupation/industry/degree ids are noisy rank-quantile
    assignments of the index, so group mean wages rise with group id rank.
    """
    cfg = config or OutcomeConfig()
    cfg.validate(population.covariates.shape[1])
    n = population.n_students
    za = _zscore(population.alpha_true)
    zb = _zscore(population.beta_true)
    index = cfg.psi_ability * za + cfg.psi_endurance * zb

    occupation = _noisy_rank_groups(
        index, cfg.assignment_noise, cfg.n_occupations, keyed_rng(seed, "occupation")
    )
    employer = _noisy_rank_groups(
        index, 1.5 * cfg.assignment_noise, cfg.n_employers, keyed_rng(seed, "employer")
    )
    industry = _noisy_rank_groups(
        index, 2.0 * cfg.assignment_noise, cfg.n_industries, keyed_rng(seed, "industry")
    )
    degree = _noisy_rank_groups(
        index, cfg.assignment_noise, cfg.n_degrees, keyed_rng(seed, "degree")
    )

    psi_e = cfg.psi_endurance
    if cfg.occupation_endurance_gradient != 0.0:
        occ_pct = (occupation + 0.5) / cfg.n_occupations
        psi_e = cfg.psi_endurance * (
            1.0 + cfg.occupation_endurance_gradient * (occ_pct - 0.5)
        )

    lam = (
        np.asarray(cfg.lambda_controls, dtype=float)
        if cfg.lambda_controls is not None
        else np.zeros(population.covariates.shape[1])
    )
    wage_noise = cfg.sigma_wage * keyed_rng(seed, "wage").standard_normal(n)
    log_wage = (
        cfg.wage_const
        + cfg.psi_ability * za
        + psi_e * zb
        + population.covariates @ lam
        + wage_noise
    )

    enroll_idx = index + keyed_rng(seed, "enroll").logistic(0.0, cfg.enroll_noise, n)
    enrolled = enroll_idx > cfg.enroll_threshold

    college_quality = (
        cfg.cq_ability * za
        + cfg.cq_endurance * zb
        + cfg.cq_noise * keyed_rng(seed, "college").standard_normal(n)
    )

    labels = tuple(f"control_{i}" for i in range(population.covariates.shape[1]))
    return OutcomePanel(
        student_ids=population.student_ids.copy(),
        log_wage=log_wage,
        enrolled=enrolled,
        college_quality=college_quality,
        employer_id=employer,
        occupation_id=occupation,
        industry_id=industry,
        degree_id=degree,
        controls=population.covariates.copy(),
        control_labels=labels,
    )


# ---------------------------------------------------------------------------
# repeated sittings


@dataclass(frozen=True)
class RetestConfig:
    # Calibrated so across-sitting correlations of the estimates land in
    # the middle of realistic ranges: ~0.67 for ability, ~0.24 for the
    # endurance slope (which also carries far more estimation noise).
    sd_alpha_transient: float = 0.06
    sd_beta_transient: float = 0.11

    def validate(self) -> None:
        if self.sd_alpha_transient < 0 or self.sd_beta_transient < 0:
            raise ParamInvalid("transient standard deviations must be non-negative")


def simulate_retest(
    population: LatentPopulation,
    design: ExamDesign,
    difficulty_true: np.ndarray,
    response_config: ResponseConfig | None = None,
    retest_config: RetestConfig | None = None,
    seed: int = 0,
) -> tuple[ResponseMatrix, ResponseMatrix]:
    """Two sittings of the same exam for every student.

    Both sittings share the latent skills; each adds independent transient
    normal shocks and draws a fresh booklet assignment, so the correlation
    of estimates across sittings reflects latent signal versus transient
    plus sampling noise.
    """
    rcfg = retest_config or RetestConfig()
    rcfg.validate()
    sittings = []
    lo, hi = population.alpha_bounds
    for s in range(2):
        shock_a = (
            keyed_rng(seed, "retest_alpha", s).standard_normal(population.n_students)
            * rcfg.sd_alpha_transient
        )
        shock_b = (
            keyed_rng(seed, "retest_beta", s).standard_normal(population.n_students)
            * rcfg.sd_beta_transient
        )
        pop_s = population.with_skills(
            np.clip(population.alpha_true + shock_a, lo, hi),
            population.beta_true + shock_b,
        )
        sittings.append(
            simulate_responses(
                design,
                pop_s,
                difficulty_true,
                response_config,
                seed=seed,
                stream=("sitting", s),
            )
        )
    return sittings[0], sittings[1]
