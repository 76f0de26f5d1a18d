"""Command line pipeline: simulate an exam, estimate, decompose, analyze.

Stages write CSV files into an output directory and record digests in
``manifest.json``; later stages read their inputs back from disk, so any
stage can be re-run or inspected in isolation.

    examdecomp simulate  --out runs/demo --config demo.cfg [--seed 7]
    examdecomp estimate  --out runs/demo
    examdecomp decompose --out runs/demo [--check-identities]
    examdecomp analyze   --out runs/demo
    examdecomp report    --out runs/demo
    examdecomp check     --out runs/demo
    examdecomp pipeline  --out runs/demo --config demo.cfg   # all of the above

Config is read once at ``simulate`` and frozen into the manifest; later
stages use the stored copy, so a run directory is self-describing.  With
the same config and seed every stage is bit-for-bit reproducible
(``EXAMDECOMP_THREADS`` only caps thread pools; results do not depend on
it).  Response cells are stored as one code per question: 1 correct, 0
answered but incorrect, 9 unanswered (counts as incorrect).

Exit codes: 0 success, 2 bad configuration, 3 missing or unreadable
input, 4 internal-consistency check failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, analysis
from . import config as config_mod
from . import decompose as decompose_mod
from . import difficulty as difficulty_mod
from . import manifest as manifest_mod
from . import position_effects, synth
from .errors import (
    ConfigInvalid,
    Empty,
    EmptyGroup,
    ExamDecompError,
    InsufficientBooklets,
    IoFailure,
    MissingInput,
    NoPairs,
    NoWithinVariation,
    ParamInvalid,
    TooFewMatched,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_IDENTITY = 4

F_DESIGN = "design.csv"
F_LATENT = "students_latent.csv"
F_DIFF_TRUE = "latent_difficulty.csv"
F_RESPONSES = "responses.csv"
F_RESPONSES_T0 = "responses_t0.csv"
F_OUTCOMES = "outcomes.csv"
F_DIFFICULTY = "difficulty.csv"
F_POSITION = "position_effects.csv"
F_PAIRS = "pair_deltas.csv"
F_NONRESPONSE = "nonresponse.csv"
F_SUBGROUPS = "subgroup_effects.csv"
F_ESTIMATES = "estimates.csv"
F_ESTIMATES_T0 = "estimates_t0.csv"
F_EXCLUDED = "excluded.csv"
F_RELIABILITY = "reliability.csv"
F_RELIABILITY_BINS = "reliability_bins.csv"
F_RETURNS = "returns.csv"
F_GROUP_RETURNS = "group_returns.csv"
F_GAPS = "gaps.csv"
F_VALIDITY = "validity.csv"
F_VALIDITY_REFORM = "validity_reform.csv"
F_SUMMARY = "summary.md"

CODE_UNANSWERED = 9


# ---------------------------------------------------------------------------
# CSV helpers


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    try:
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")


def _read_frame(path: Path, required: tuple[str, ...]) -> pd.DataFrame:
    if not path.exists():
        raise MissingInput(f"missing input file {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, OSError, ValueError) as exc:
        raise IoFailure(f"{path}: {exc}")
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise IoFailure(f"{path}: missing columns {missing}")
    return frame


def _column(frame, name, path, allow_nan=False):
    """Numeric column as float array; corrupt cells reported with row numbers
    (1-based, counting the header as row 1)."""
    coerced = pd.to_numeric(frame[name], errors="coerce")
    bad = coerced.isna() & frame[name].notna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise IoFailure(
            f"{path}: row {row + 2}: bad value {frame[name].iloc[row]!r} in column {name!r}"
        )
    if not allow_nan and coerced.isna().any():
        row = int(np.flatnonzero(coerced.isna().to_numpy())[0])
        raise IoFailure(f"{path}: row {row + 2}: missing value in column {name!r}")
    return coerced.to_numpy(dtype=float)


def _int_column(frame, name, path):
    vals = _column(frame, name, path)
    ints = vals.astype(np.int64)
    if (ints != vals).any():
        row = int(np.flatnonzero(ints != vals)[0])
        raise IoFailure(f"{path}: row {row + 2}: column {name!r} must be integer")
    return ints


# ---------------------------------------------------------------------------
# frame <-> object converters


def design_to_frame(design: synth.ExamDesign) -> pd.DataFrame:
    data = {
        "question_id": design.question_ids,
        "day": design.day_of,
        "subject": design.subject_of,
        "length_words": design.length_words,
    }
    for b in range(design.n_booklets):
        data[f"pos_b{b + 1}"] = design.position[b]
    return pd.DataFrame(data)


def frame_to_design(frame: pd.DataFrame, path: Path) -> synth.ExamDesign:
    for col in ("question_id", "day", "subject", "length_words"):
        if col not in frame.columns:
            raise IoFailure(f"{path}: missing column {col!r}")
    frame = frame.sort_values("question_id", kind="stable").reset_index(drop=True)
    qid = _int_column(frame, "question_id", path)
    j = qid.shape[0]
    if j == 0:
        raise IoFailure(f"{path}: empty design")
    if not np.array_equal(qid, np.arange(j)):
        raise IoFailure(f"{path}: question ids must be dense 0..{j - 1}")
    day = _int_column(frame, "day", path)
    days = int(day.max()) + 1
    if j % days != 0:
        raise IoFailure(f"{path}: {j} questions do not divide into {days} days")
    qpd = j // days
    if not np.array_equal(day, qid // qpd):
        raise IoFailure(f"{path}: day column must equal question_id // questions_per_day")
    booklet_cols = sorted(
        (c for c in frame.columns if c.startswith("pos_b")), key=lambda c: int(c[5:])
    )
    if not booklet_cols:
        raise IoFailure(f"{path}: no booklet position columns (pos_b1, ...)")
    if [int(c[5:]) for c in booklet_cols] != list(range(1, len(booklet_cols) + 1)):
        raise IoFailure(f"{path}: booklet columns must be pos_b1..pos_bB")
    position = np.zeros((len(booklet_cols), j), dtype=np.int16)
    for b, col in enumerate(booklet_cols):
        position[b] = _int_column(frame, col, path).astype(np.int16)
        for d in range(days):
            block = np.sort(position[b, day == d])
            if not np.array_equal(block, np.arange(1, qpd + 1)):
                raise IoFailure(
                    f"{path}: booklet {b + 1} day {d} positions are not a permutation of 1..{qpd}"
                )
    return synth.ExamDesign(
        days=days,
        questions_per_day=qpd,
        n_booklets=len(booklet_cols),
        question_ids=qid,
        day_of=day,
        subject_of=frame["subject"].to_numpy(dtype=object),
        length_words=_int_column(frame, "length_words", path),
        position=position,
    )


def population_to_frame(pop: synth.LatentPopulation) -> pd.DataFrame:
    data = {
        "student_id": pop.student_ids,
        "alpha_true": pop.alpha_true,
        "beta_true": pop.beta_true,
    }
    for name in sorted(pop.flags):
        data[f"flag_{name}"] = pop.flags[name].astype(np.int64)
    for k in range(pop.covariates.shape[1]):
        data[f"cov_{k}"] = pop.covariates[:, k]
    return pd.DataFrame(data)


def frame_to_population(frame: pd.DataFrame, path: Path) -> synth.LatentPopulation:
    ids = _int_column(frame, "student_id", path)
    flags = {
        c[len("flag_"):]: _int_column(frame, c, path).astype(bool)
        for c in frame.columns
        if c.startswith("flag_")
    }
    cov_cols = sorted(
        (c for c in frame.columns if c.startswith("cov_")), key=lambda c: int(c[4:])
    )
    covariates = (
        np.column_stack([_column(frame, c, path) for c in cov_cols])
        if cov_cols
        else np.zeros((ids.shape[0], 0))
    )
    return synth.LatentPopulation(
        student_ids=ids,
        alpha_true=_column(frame, "alpha_true", path),
        beta_true=_column(frame, "beta_true", path),
        flags=flags,
        covariates=covariates,
    )


def responses_to_frame(resp: synth.ResponseMatrix) -> pd.DataFrame:
    design = resp.design
    codes = np.where(resp.correct, 1, 0).astype(np.int8)
    codes[~resp.answered] = CODE_UNANSWERED
    data = {"student_id": resp.student_ids}
    for d in range(design.days):
        data[f"booklet_d{d}"] = resp.booklet[:, d]
    for j, q in enumerate(design.question_ids):
        data[f"q{q}"] = codes[:, j]
    return pd.DataFrame(data)


def frame_to_responses(
    frame: pd.DataFrame, design: synth.ExamDesign, path: Path
) -> synth.ResponseMatrix:
    ids = _int_column(frame, "student_id", path)
    if np.unique(ids).shape[0] != ids.shape[0]:
        raise IoFailure(f"{path}: duplicate student ids")
    booklet = np.zeros((ids.shape[0], design.days), dtype=np.int64)
    for d in range(design.days):
        col = f"booklet_d{d}"
        if col not in frame.columns:
            raise IoFailure(f"{path}: missing column {col!r}")
        booklet[:, d] = _int_column(frame, col, path)
    if ((booklet < 1) | (booklet > design.n_booklets)).any():
        row = int(
            np.flatnonzero(((booklet < 1) | (booklet > design.n_booklets)).any(axis=1))[0]
        )
        raise IoFailure(
            f"{path}: row {row + 2}: booklet outside 1..{design.n_booklets}"
        )
    qcols = [f"q{q}" for q in design.question_ids]
    missing = [c for c in qcols if c not in frame.columns]
    if missing:
        raise IoFailure(f"{path}: missing question columns (first: {missing[0]!r})")
    codes = np.column_stack([_int_column(frame, c, path) for c in qcols])
    ok = np.isin(codes, (0, 1, CODE_UNANSWERED))
    if not ok.all():
        row = int(np.flatnonzero(~ok.all(axis=1))[0])
        raise IoFailure(
            f"{path}: row {row + 2}: response codes must be 0, 1 or {CODE_UNANSWERED}"
        )
    position = design.position[booklet[:, design.day_of] - 1, np.arange(design.n_questions)]
    return synth.ResponseMatrix(
        design=design,
        student_ids=ids,
        booklet=booklet,
        position=position.astype(np.int16),
        answered=codes != CODE_UNANSWERED,
        correct=codes == 1,
    )


def outcomes_to_frame(panel: synth.OutcomePanel) -> pd.DataFrame:
    data = {
        "student_id": panel.student_ids,
        "log_wage": panel.log_wage,
        "enrolled": panel.enrolled.astype(np.int64),
        "college_quality": panel.college_quality,
        "occupation_id": panel.occupation_id,
        "employer_id": panel.employer_id,
        "industry_id": panel.industry_id,
        "degree_id": panel.degree_id,
    }
    for k, lab in enumerate(panel.control_labels):
        data[lab] = panel.controls[:, k]
    return pd.DataFrame(data)


def frame_to_outcomes(frame: pd.DataFrame, path: Path) -> synth.OutcomePanel:
    ids = _int_column(frame, "student_id", path)
    cov_cols = sorted(
        (c for c in frame.columns if c.startswith("control_")),
        key=lambda c: int(c[len("control_"):]),
    )
    controls = (
        np.column_stack([_column(frame, c, path) for c in cov_cols])
        if cov_cols
        else np.zeros((ids.shape[0], 0))
    )
    return synth.OutcomePanel(
        student_ids=ids,
        log_wage=_column(frame, "log_wage", path),
        enrolled=_int_column(frame, "enrolled", path).astype(bool),
        college_quality=_column(frame, "college_quality", path),
        employer_id=_int_column(frame, "employer_id", path),
        occupation_id=_int_column(frame, "occupation_id", path),
        industry_id=_int_column(frame, "industry_id", path),
        degree_id=_int_column(frame, "degree_id", path),
        controls=controls,
        control_labels=tuple(cov_cols),
    )


def difficulty_tables_to_frame(tables: dict[str, difficulty_mod.DifficultyTable]) -> pd.DataFrame:
    frames = []
    for method in sorted(tables):
        t = tables[method]
        frames.append(
            pd.DataFrame(
                {
                    "method": method,
                    "question_id": t.question_ids,
                    "fraction_correct_raw": t.fraction_correct_raw,
                    "avg_position": t.avg_position,
                    "position_effect_used": t.position_effect_used,
                    "difficulty": t.difficulty,
                    "fallback": t.fallback.astype(np.int64),
                    "n_students_used": t.n_students_used,
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def frame_to_difficulty(
    frame: pd.DataFrame, method: str, path: Path
) -> difficulty_mod.DifficultyTable:
    sub = frame[frame["method"] == method].reset_index(drop=True)
    if len(sub) == 0:
        raise MissingInput(f"{path}: no rows for difficulty method {method!r}")
    return difficulty_mod.DifficultyTable(
        method=method,
        question_ids=_int_column(sub, "question_id", path),
        fraction_correct_raw=_column(sub, "fraction_correct_raw", path),
        avg_position=_column(sub, "avg_position", path),
        position_effect_used=_column(sub, "position_effect_used", path),
        difficulty=_column(sub, "difficulty", path),
        fallback=_int_column(sub, "fallback", path).astype(bool),
        n_students_used=int(_int_column(sub, "n_students_used", path)[0]),
    )


def estimates_to_frame(est: decompose_mod.SkillEstimates) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "spec": est.spec,
            "student_id": est.student_ids,
            "alpha_hat": est.alpha_hat,
            "beta_hat": est.beta_hat,
            "delta_hat": est.delta_hat,
            "se_alpha": est.se_alpha,
            "se_beta": est.se_beta,
            "n_items": est.n_items,
            "mean_posnorm": est.mean_posnorm,
            "mean_difficulty": est.mean_difficulty,
            "fe_adjust": est.fe_adjust,
        }
    )


def frame_to_estimates(frame: pd.DataFrame, path: Path) -> decompose_mod.SkillEstimates:
    if len(frame) == 0:
        raise Empty(f"{path}: no estimates")
    frame = frame.sort_values("student_id", kind="stable").reset_index(drop=True)
    return decompose_mod.SkillEstimates(
        spec=str(frame["spec"].iloc[0]),
        student_ids=_int_column(frame, "student_id", path),
        alpha_hat=_column(frame, "alpha_hat", path),
        beta_hat=_column(frame, "beta_hat", path),
        delta_hat=_column(frame, "delta_hat", path, allow_nan=True),
        se_alpha=_column(frame, "se_alpha", path),
        se_beta=_column(frame, "se_beta", path),
        n_items=_int_column(frame, "n_items", path),
        mean_posnorm=_column(frame, "mean_posnorm", path),
        mean_difficulty=_column(frame, "mean_difficulty", path, allow_nan=True),
        fe_adjust=_column(frame, "fe_adjust", path),
    )


def _subset_responses(resp: synth.ResponseMatrix, mask: np.ndarray) -> synth.ResponseMatrix:
    return replace(
        resp,
        student_ids=resp.student_ids[mask],
        booklet=resp.booklet[mask],
        position=resp.position[mask],
        answered=resp.answered[mask],
        correct=resp.correct[mask],
    )


# ---------------------------------------------------------------------------
# shared stage plumbing


def _load_run(out_dir: Path) -> tuple[dict, config_mod.RunConfig]:
    man = manifest_mod.load_manifest(out_dir)
    cfg = config_mod.parse_config_text(man.get("config", ""), source="manifest")
    return man, cfg


def _split_masks(cfg: config_mod.RunConfig, student_ids: np.ndarray):
    """(difficulty-estimation mask, analysis mask) per the holdout setting.

    With the holdout on (default), question difficulty is estimated on one
    half of the students and everything downstream uses the other half, so
    difficulty is never fit on the students it is later applied to.
    """
    if not cfg.get("difficulty.holdout", True):
        full = np.ones(student_ids.shape[0], dtype=bool)
        return full, full
    mask = difficulty_mod.holdout_mask(
        student_ids,
        fraction=float(cfg.get("difficulty.holdout_fraction", 0.5)),
        salt=int(cfg.get("difficulty.holdout_salt", 0)),
    )
    return mask, ~mask


def _read_design(out_dir: Path) -> synth.ExamDesign:
    path = out_dir / F_DESIGN
    return frame_to_design(_read_frame(path, ("question_id",)), path)


def _read_responses(out_dir: Path, design: synth.ExamDesign, name: str = F_RESPONSES):
    path = out_dir / name
    return frame_to_responses(_read_frame(path, ("student_id",)), design, path)


def _read_estimates(out_dir: Path, name: str = F_ESTIMATES):
    path = out_dir / name
    return frame_to_estimates(_read_frame(path, ("spec", "student_id")), path)


def _read_difficulty_table(out_dir: Path, cfg: config_mod.RunConfig):
    path = out_dir / F_DIFFICULTY
    frame = _read_frame(path, ("method", "question_id", "difficulty"))
    return frame_to_difficulty(frame, cfg.get("difficulty.method", "pooled"), path)


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        cfg = config_mod.parse_config_file(args.config)
    else:
        cfg = config_mod.RunConfig(values={})
    if args.seed is not None:
        cfg = config_mod.RunConfig(values={**cfg.values, "seed": args.seed})
    seed = cfg.seed

    design = synth.build_design(cfg.design(), seed=seed)
    population = synth.draw_population(cfg.latents(), seed=seed)
    diff_true = synth.draw_difficulty(design.n_questions, sd=cfg.difficulty_sd, seed=seed)

    item_params = None
    if cfg.get("response.model", "linear") == "three_pl":
        lat = cfg.latents()
        loading = float(cfg.get("response.difficulty_loading", 1.0))
        item_params = synth.ItemParams3PL(
            discrimination=np.full(
                design.n_questions, float(cfg.get("response.three_pl.discrimination", 1.0))
            ),
            location=-loading * diff_true / lat.sd_alpha,
            guessing=np.full(
                design.n_questions, float(cfg.get("response.three_pl.guessing", 0.2))
            ),
        )
    resp_cfg = cfg.response(item_params)

    files = [F_DESIGN, F_LATENT, F_DIFF_TRUE, F_RESPONSES, F_OUTCOMES]
    if cfg.retest_enabled:
        prior, current = synth.simulate_retest(
            population, design, diff_true, resp_cfg, cfg.retest(), seed=seed
        )
        responses = current
        files.append(F_RESPONSES_T0)
    else:
        prior = None
        responses = synth.simulate_responses(
            design, population, diff_true, resp_cfg, seed=seed
        )
    outcomes = synth.simulate_outcomes(
        population, cfg.outcomes(population.covariates.shape[1]), seed=seed
    )

    _write_csv(design_to_frame(design), out / F_DESIGN)
    _write_csv(population_to_frame(population), out / F_LATENT)
    _write_csv(
        pd.DataFrame({"question_id": design.question_ids, "difficulty": diff_true}),
        out / F_DIFF_TRUE,
    )
    _write_csv(responses_to_frame(responses), out / F_RESPONSES)
    if prior is not None:
        _write_csv(responses_to_frame(prior), out / F_RESPONSES_T0)
    _write_csv(outcomes_to_frame(outcomes), out / F_OUTCOMES)

    manifest_mod.start_manifest(out, cfg.config_hash(), seed, cfg.canonical_text())
    manifest_mod.record_stage(
        out,
        "simulate",
        files,
        extra={
            "n_students": int(population.n_students),
            "n_questions": int(design.n_questions),
            "n_booklets": int(design.n_booklets),
            "clamped_low": int(responses.n_clamped_low),
            "clamped_high": int(responses.n_clamped_high),
            "unanswered": int((~responses.answered).sum()),
        },
    )
    print(f"simulate: {population.n_students} students, {design.n_questions} questions -> {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    out = Path(args.out)
    man, cfg = _load_run(out)
    manifest_mod.require_stage(man, "simulate", out)
    design = _read_design(out)
    responses = _read_responses(out, design)
    diff_mask, analysis_mask = _split_masks(cfg, responses.student_ids)

    extra: dict = {
        "difficulty_students": int(diff_mask.sum()),
        "analysis_students": int(analysis_mask.sum()),
    }
    files = []

    try:
        tables = difficulty_mod.estimate_all_methods(responses, student_mask=diff_mask)
        extra["insufficient_booklets"] = False
    except InsufficientBooklets as exc:
        # Single-booklet runs cannot separate difficulty from position:
        # write the raw table as a diagnostic and skip the position stages.
        tables = {
            "raw": difficulty_mod.estimate_difficulty(
                responses, method="raw", student_mask=diff_mask
            )
        }
        extra["insufficient_booklets"] = True
        extra["detail"] = str(exc)
        print(f"estimate: {exc}; writing raw difficulty only", file=sys.stderr)
    _write_csv(difficulty_tables_to_frame(tables), out / F_DIFFICULTY)
    files.append(F_DIFFICULTY)

    if not extra["insufficient_booklets"]:
        chosen = tables[cfg.get("difficulty.method", "pooled")]
        panel = position_effects.build_booklet_panel(responses, student_mask=analysis_mask)
        fe = position_effects.mean_endurance_fe(panel)
        da = position_effects.mean_endurance_diffadj(panel, chosen)
        pairs = position_effects.booklet_pair_deltas(panel)
        qpd_scale = float(design.questions_per_day - 1)
        rows = [
            (fe.design_label, fe.beta_daily, fe.se, fe.n_questions, fe.n_cells,
             fe.r_squared, fe.intercept),
            (da.design_label, da.beta_daily, da.se, da.n_questions, da.n_cells,
             da.r_squared, da.intercept),
            ("pair_deltas", pairs.slope_per_position * qpd_scale,
             pairs.se_slope * qpd_scale, panel.n_questions, pairs.n_pairs_total,
             None, pairs.intercept),
        ]
        _write_csv(
            pd.DataFrame(
                rows,
                columns=["estimator", "beta_daily", "se", "n_questions", "n_cells",
                         "r_squared", "intercept"],
            ),
            out / F_POSITION,
        )
        _write_csv(
            pd.DataFrame(
                {
                    "delta_position": pairs.delta_position,
                    "mean_delta_fraction": pairs.mean_delta_fraction,
                    "n_pairs": pairs.n_pairs,
                }
            ),
            out / F_PAIRS,
        )
        files += [F_POSITION, F_PAIRS]

        sub_rows = []
        try:
            part = position_effects.partition_by_median(
                chosen.question_ids, chosen.difficulty, labels=("harder_half", "easier_half")
            )
            for label, est in position_effects.subgroup_position_effects(panel, part).items():
                sub_rows.append(("difficulty_median", label, est.design_label,
                                 est.beta_daily, est.se, est.n_questions, est.n_cells))
        except NoWithinVariation as exc:
            print(f"estimate: difficulty subgroup skipped: {exc}", file=sys.stderr)
        try:
            part = position_effects.partition_by_half_day(panel)
            for label, est in position_effects.subgroup_position_effects(panel, part).items():
                sub_rows.append(("half_day", label, est.design_label,
                                 est.beta_daily, est.se, est.n_questions, est.n_cells))
        except NoWithinVariation as exc:
            print(f"estimate: half-day subgroup skipped: {exc}", file=sys.stderr)
        if sub_rows:
            _write_csv(
                pd.DataFrame(
                    sub_rows,
                    columns=["partition", "label", "estimator", "beta_daily", "se",
                             "n_questions", "n_cells"],
                ),
                out / F_SUBGROUPS,
            )
            files.append(F_SUBGROUPS)

    nonresp = position_effects.nonresponse_by_position(responses)
    _write_csv(
        pd.DataFrame(
            {
                "day": nonresp.day,
                "position": nonresp.position,
                "fraction_unanswered": nonresp.fraction_unanswered,
            }
        ),
        out / F_NONRESPONSE,
    )
    files.append(F_NONRESPONSE)

    manifest_mod.record_stage(out, "estimate", files, extra=extra)
    print(f"estimate: wrote {', '.join(files)}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    out = Path(args.out)
    man, cfg = _load_run(out)
    manifest_mod.require_stage(man, "estimate", out)
    if man["stages"].get("estimate", {}).get("insufficient_booklets"):
        raise MissingInput("cannot decompose a single-booklet run")
    design = _read_design(out)
    responses = _read_responses(out, design)
    _, analysis_mask = _split_masks(cfg, responses.student_ids)
    table = _read_difficulty_table(out, cfg)

    kwargs = dict(
        difficulty=table,
        spec=cfg.get("estimate.spec", "baseline"),
        demean=cfg.get("estimate.demean", "per_booklet"),
        min_items=int(cfg.get("estimate.min_items", 10)),
        min_positions=int(cfg.get("estimate.min_positions", 3)),
    )
    est = decompose_mod.decompose_cohort(_subset_responses(responses, analysis_mask), **kwargs)
    if cfg.get("estimate.shrink", False):
        est = decompose_mod.shrink_skill_estimates(est)
    _write_csv(estimates_to_frame(est), out / F_ESTIMATES)
    _write_csv(
        pd.DataFrame(est.excluded, columns=["student_id", "reason"]), out / F_EXCLUDED
    )
    files = [F_ESTIMATES, F_EXCLUDED]

    extra: dict = {"excluded": len(est.excluded), "spec": est.spec}
    moments = decompose_mod.latent_moments(est)
    extra["sd_alpha_latent"] = moments.sd_alpha_latent
    extra["sd_beta_latent"] = moments.sd_beta_latent
    extra["corr_alpha_beta_hat"] = moments.corr_alpha_beta

    if (out / F_RESPONSES_T0).exists():
        prior = _read_responses(out, design, F_RESPONSES_T0)
        est0 = decompose_mod.decompose_cohort(
            _subset_responses(prior, analysis_mask), **kwargs
        )
        if cfg.get("estimate.shrink", False):
            est0 = decompose_mod.shrink_skill_estimates(est0)
        _write_csv(estimates_to_frame(est0), out / F_ESTIMATES_T0)
        files.append(F_ESTIMATES_T0)
        try:
            rel = decompose_mod.retest_reliability(est0, est)
            _write_csv(
                pd.DataFrame(
                    {
                        "skill": ["ability", "endurance"],
                        "pearson_r": [rel.r_alpha, rel.r_beta],
                        "n_matched": [rel.n_matched, rel.n_matched],
                    }
                ),
                out / F_RELIABILITY,
            )
            _write_csv(
                pd.DataFrame(
                    {
                        "skill": rel.skill,
                        "bin_index": rel.bin_index,
                        "mean_first": rel.mean_first,
                        "mean_second": rel.mean_second,
                        "bin_n": rel.bin_n,
                    }
                ),
                out / F_RELIABILITY_BINS,
            )
            files += [F_RELIABILITY, F_RELIABILITY_BINS]
            extra["r_alpha"] = rel.r_alpha
            extra["r_beta"] = rel.r_beta
        except TooFewMatched as exc:
            print(f"decompose: reliability skipped: {exc}", file=sys.stderr)

    manifest_mod.record_stage(out, "decompose", files, extra=extra)
    print(
        f"decompose: {est.n_students} students estimated "
        f"({len(est.excluded)} excluded), spec={est.spec}"
    )
    if args.check_identities:
        failures = _run_checks(out, man, cfg, design, responses, est, table)
        if failures:
            return EXIT_IDENTITY
    return EXIT_OK


def _first_flag(frame: pd.DataFrame) -> str | None:
    flags = sorted(c[len("flag_"):] for c in frame.columns if c.startswith("flag_"))
    return flags[0] if flags else None


def cmd_analyze(args) -> int:
    out = Path(args.out)
    man, cfg = _load_run(out)
    manifest_mod.require_stage(man, "decompose", out)
    design = _read_design(out)
    responses = _read_responses(out, design)
    est = _read_estimates(out)
    outcomes_path = out / F_OUTCOMES
    outcomes = frame_to_outcomes(
        _read_frame(outcomes_path, ("student_id", "log_wage")), outcomes_path
    )

    outcome_label = cfg.get("analysis.outcome", "log_wage")
    controls = bool(cfg.get("analysis.controls", True))
    scale = cfg.get("analysis.skill_scale", "sample")
    skipped: list[str] = []
    files: list[str] = []
    returns_rows: list[tuple] = []

    def note(what: str, exc: Exception) -> None:
        skipped.append(f"{what}: {exc}")
        print(f"analyze: {what} skipped: {exc}", file=sys.stderr)

    try:
        res = analysis.returns_ols(
            outcomes,
            est,
            outcome_label=outcome_label,
            spec="skills",
            controls=controls,
            precision_weights=bool(cfg.get("analysis.precision_weights", False)),
            skill_scale=scale,
        )
        for term in res.coefficients:
            returns_rows.append(
                ("ols_skills", outcome_label, term, res.coefficients[term],
                 res.ses[term], res.n)
            )
        if res.ratio is not None:
            returns_rows.append(
                ("ols_skills", outcome_label, "endurance_over_ability",
                 res.ratio.value, res.ratio.se, res.n)
            )
    except ExamDecompError as exc:
        note("ols returns", exc)
    try:
        res = analysis.returns_ols(
            outcomes, est, outcome_label=outcome_label, spec="score_only",
            controls=controls,
        )
        for term in res.coefficients:
            returns_rows.append(
                ("ols_score", outcome_label, term, res.coefficients[term],
                 res.ses[term], res.n)
            )
    except ExamDecompError as exc:
        note("score-only returns", exc)
    try:
        dec = analysis.returns_decile(outcomes, est, outcome_label=outcome_label)
        for i in range(dec.skill.shape[0]):
            returns_rows.append(
                ("decile", outcome_label, f"{dec.skill[i]}_d{dec.decile[i]}",
                 float(dec.coefficient[i]), float(dec.se[i]), dec.n)
            )
    except ExamDecompError as exc:
        note("decile returns", exc)
    if (out / F_ESTIMATES_T0).exists():
        try:
            est0 = _read_estimates(out, F_ESTIMATES_T0)
            iv = analysis.returns_iv(
                outcomes, est, est0, outcome_label=outcome_label, controls=controls,
                skill_scale=cfg.get("analysis.iv_scale", "latent"),
            )
            for term, b in iv.iv_coefficients.items():
                returns_rows.append(
                    ("iv", outcome_label, term, b, iv.iv_ses[term], iv.n)
                )
            for term, b in iv.ols_coefficients.items():
                returns_rows.append(
                    ("iv_ols", outcome_label, term, b, iv.ols_ses[term], iv.n)
                )
            for term, f in iv.first_stage_f.items():
                returns_rows.append(
                    ("iv_first_stage_f", outcome_label, term, f, np.nan, iv.n)
                )
        except ExamDecompError as exc:
            note("iv returns", exc)
    if returns_rows:
        _write_csv(
            pd.DataFrame(
                returns_rows,
                columns=["block", "outcome", "term", "estimate", "se", "n"],
            ),
            out / F_RETURNS,
        )
        files.append(F_RETURNS)

    try:
        grp = analysis.group_returns(
            outcomes,
            est,
            group_field=cfg.get("analysis.group_field", "occupation_id"),
            outcome_label=outcome_label,
            min_n=int(cfg.get("analysis.min_group_n", 200)),
        )
        _write_csv(
            pd.DataFrame(
                {
                    "group_field": grp.group_field,
                    "group_id": grp.group_id,
                    "n": grp.n,
                    "psi_ability": grp.psi_ability,
                    "se_ability": grp.se_ability,
                    "psi_endurance": grp.psi_endurance,
                    "se_endurance": grp.se_endurance,
                    "mean_outcome": grp.mean_outcome,
                    "outcome_percentile": grp.outcome_percentile,
                }
            ),
            out / F_GROUP_RETURNS,
        )
        files.append(F_GROUP_RETURNS)
    except ExamDecompError as exc:
        note("group returns", exc)

    latent_path = out / F_LATENT
    latent_frame = _read_frame(latent_path, ("student_id",))
    flag_name = cfg.get("analysis.gap_flag", "") or _first_flag(latent_frame)
    if flag_name:
        col = f"flag_{flag_name}"
        if col not in latent_frame.columns:
            note("gap decomposition", MissingInput(f"no column {col!r} in {F_LATENT}"))
        else:
            lat_ids = _int_column(latent_frame, "student_id", latent_path)
            flag_all = _int_column(latent_frame, col, latent_path).astype(bool)
            order = np.argsort(lat_ids, kind="stable")
            pos = np.searchsorted(lat_ids[order], est.student_ids)
            flag = flag_all[order[pos]]
            try:
                gap = analysis.gap_decomposition(
                    est, flag, variant=cfg.get("analysis.gap_variant", "unconditional")
                )
                reform = analysis.reform_counterfactual(
                    gap, factor=float(cfg.get("analysis.reform_factor", 0.5))
                )
                _write_csv(
                    pd.DataFrame(
                        [
                            {
                                "flag": flag_name,
                                "variant": gap.variant,
                                "n_group1": gap.n_group1,
                                "n_group0": gap.n_group0,
                                "score_gap": gap.score_gap,
                                "se_score_gap": gap.se_score_gap,
                                "ability_component": gap.ability_component,
                                "se_ability_component": gap.se_ability_component,
                                "endurance_component": gap.endurance_component,
                                "se_endurance_component": gap.se_endurance_component,
                                "residual": gap.residual,
                                "mean_posnorm": gap.mean_posnorm,
                                "reform_factor": reform.factor,
                                "reform_delta_pp": reform.delta_pp,
                                "reform_se_delta_pp": reform.se_delta_pp,
                                "reform_delta_pct": reform.delta_pct,
                                "reform_se_delta_pct": reform.se_delta_pct,
                            }
                        ]
                    ),
                    out / F_GAPS,
                )
                files.append(F_GAPS)
            except (EmptyGroup, ExamDecompError) as exc:
                note("gap decomposition", exc)
    else:
        skipped.append("gap decomposition: no group flags in population")

    try:
        validity = analysis.question_validity(
            responses,
            outcomes,
            outcome_label=cfg.get("analysis.validity_outcome", "log_wage"),
            min_cell=int(cfg.get("analysis.validity_min_cell", 50)),
        )
        _write_csv(
            pd.DataFrame(
                {
                    "outcome": validity.outcome_label,
                    "question_id": validity.question_id,
                    "booklet": validity.booklet,
                    "day": validity.day,
                    "position": validity.position,
                    "n_students": validity.n_students,
                    "fraction_correct": validity.fraction_correct,
                    "rho": validity.rho,
                    "se_rho": validity.se_rho,
                }
            ),
            out / F_VALIDITY,
        )
        files.append(F_VALIDITY)
        reform_v = analysis.validity_reform_regression(validity)
        _write_csv(
            pd.DataFrame(
                [
                    {
                        "outcome": reform_v.outcome_label,
                        "gamma_per_position": reform_v.gamma_per_position,
                        "se_gamma": reform_v.se_gamma,
                        "gamma_reform": reform_v.gamma_reform,
                        "se_gamma_reform": reform_v.se_gamma_reform,
                        "t_stat": reform_v.t_stat,
                        "pct_of_mean": reform_v.pct_of_mean,
                        "mean_rho": reform_v.mean_rho,
                        "mean_position": reform_v.mean_position,
                        "n_cells": reform_v.n_cells,
                        "n_questions": reform_v.n_questions,
                    }
                ]
            ),
            out / F_VALIDITY_REFORM,
        )
        files.append(F_VALIDITY_REFORM)
    except ExamDecompError as exc:
        note("question validity", exc)

    manifest_mod.record_stage(out, "analyze", files, extra={"skipped": skipped})
    print(f"analyze: wrote {', '.join(files) if files else 'nothing'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "-"
    return format(float(x), ".4g")


def cmd_report(args) -> int:
    out = Path(args.out)
    man, cfg = _load_run(out)
    manifest_mod.require_stage(man, "analyze", out)
    design = _read_design(out)
    responses = _read_responses(out, design)
    lines: list[str] = []
    files: list[str] = []
    add = lines.append

    add("# Exam decomposition run summary")
    add("")
    add(f"- package version: {man['package_version']}")
    add(f"- config hash: `{man['config_hash']}`")
    add(f"- seed: {man['seed']}")
    sim = man["stages"].get("simulate", {})
    add(
        f"- cohort: {sim.get('n_students')} students, {sim.get('n_questions')} questions, "
        f"{sim.get('n_booklets')} booklets"
    )
    add(
        f"- simulation diagnostics: {sim.get('clamped_low', 0)} probabilities clamped at 0, "
        f"{sim.get('clamped_high', 0)} at 1, {sim.get('unanswered', 0)} unanswered cells"
    )
    add("")

    # accuracy by position (pooled over booklets), also written as a figure table
    prof_rows = []
    for day in range(design.days):
        cols = np.flatnonzero(design.day_of == day)
        pos = responses.position[:, cols].ravel().astype(np.int64)
        cor = responses.correct[:, cols].ravel().astype(float)
        sums = np.bincount(pos - 1, weights=cor, minlength=design.questions_per_day)
        cnts = np.bincount(pos - 1, minlength=design.questions_per_day)
        for p in range(design.questions_per_day):
            if cnts[p]:
                prof_rows.append((day, p + 1, sums[p] / cnts[p], int(cnts[p])))
    prof = pd.DataFrame(
        prof_rows, columns=["day", "position", "fraction_correct", "n"]
    )
    _write_csv(prof, out / "fig_position_profile.csv")
    files.append("fig_position_profile.csv")
    first = prof[prof["position"] <= 5].groupby("day")["fraction_correct"].mean()
    last = prof[prof["position"] > design.questions_per_day - 5].groupby("day")[
        "fraction_correct"
    ].mean()
    add("## Accuracy over the testing day")
    add("")
    for day in sorted(first.index):
        add(
            f"- day {day}: first five positions {_fmt(first[day])}, "
            f"last five {_fmt(last[day])} ({_fmt(last[day] - first[day])} change)"
        )
    add("")

    if (out / F_POSITION).exists():
        pos_tab = pd.read_csv(out / F_POSITION)
        add("## Mean position effect (per day, fraction correct)")
        add("")
        add("| estimator | effect | se | questions | cells |")
        add("|---|---|---|---|---|")
        for _, r in pos_tab.iterrows():
            add(
                f"| {r['estimator']} | {_fmt(r['beta_daily'])} | {_fmt(r['se'])} "
                f"| {int(r['n_questions'])} | {int(r['n_cells'])} |"
            )
        add("")
    if (out / F_SUBGROUPS).exists():
        sub = pd.read_csv(out / F_SUBGROUPS)
        add("## Position effects by question subgroup")
        add("")
        add("| partition | label | effect | se |")
        add("|---|---|---|---|")
        for _, r in sub.iterrows():
            add(
                f"| {r['partition']} | {r['label']} | {_fmt(r['beta_daily'])} "
                f"| {_fmt(r['se'])} |"
            )
        add("")

    dec_extra = man["stages"].get("decompose", {})
    add("## Skill estimates")
    add("")
    add(f"- spec: {dec_extra.get('spec')}")
    add(f"- students excluded: {dec_extra.get('excluded')}")
    add(
        f"- noise-corrected dispersion: ability {_fmt(dec_extra.get('sd_alpha_latent'))}, "
        f"endurance {_fmt(dec_extra.get('sd_beta_latent'))}"
    )
    add(
        f"- correlation of the two estimates: {_fmt(dec_extra.get('corr_alpha_beta_hat'))}"
    )
    if "r_alpha" in dec_extra:
        add(
            f"- across-sitting reliability: ability {_fmt(dec_extra['r_alpha'])}, "
            f"endurance {_fmt(dec_extra['r_beta'])}"
        )
    add("")
    if (out / F_RELIABILITY_BINS).exists():
        bins = pd.read_csv(out / F_RELIABILITY_BINS)
        _write_csv(bins, out / "fig_reliability_bins.csv")
        files.append("fig_reliability_bins.csv")

    if (out / F_RETURNS).exists():
        ret = pd.read_csv(out / F_RETURNS)
        add("## Returns to skills")
        add("")
        add("| block | term | estimate | se |")
        add("|---|---|---|---|")
        keep = ret[ret["block"].isin(["ols_skills", "ols_score", "iv", "iv_ols"])]
        for _, r in keep.iterrows():
            if r["term"].startswith("cov_") or r["term"] == "const":
                continue
            add(f"| {r['block']} | {r['term']} | {_fmt(r['estimate'])} | {_fmt(r['se'])} |")
        add("")
        dec_rows = ret[ret["block"] == "decile"]
        if len(dec_rows):
            fig = dec_rows.assign(
                skill=[t.rsplit("_d", 1)[0] for t in dec_rows["term"]],
                decile=[int(t.rsplit("_d", 1)[1]) for t in dec_rows["term"]],
            )[["skill", "decile", "estimate", "se"]]
            _write_csv(fig, out / "fig_decile_returns.csv")
            files.append("fig_decile_returns.csv")

    if (out / F_GROUP_RETURNS).exists():
        grp = pd.read_csv(out / F_GROUP_RETURNS)
        add("## Returns heterogeneity across groups")
        add("")
        stat, df, p = analysis.overdispersion_test(
            grp["psi_endurance"].to_numpy(), grp["se_endurance"].to_numpy()
        )
        add(
            f"- {len(grp)} groups ({grp['group_field'].iloc[0]}); endurance-return "
            f"overdispersion chi2({df}) = {_fmt(stat)}, p = {_fmt(p)}"
        )
        x = grp["outcome_percentile"].to_numpy()
        yv = grp["psi_endurance"].to_numpy()
        if len(grp) > 2 and x.std() > 0:
            slope = float(np.cov(x, yv, ddof=1)[0, 1] / x.var(ddof=1))
            add(f"- endurance return rises {_fmt(slope)} per percentile of group mean outcome")
        add("")

    if (out / F_GAPS).exists():
        gap = pd.read_csv(out / F_GAPS).iloc[0]
        add("## Group gap decomposition")
        add("")
        add(
            f"- flag `{gap['flag']}` ({gap['variant']}): score gap {_fmt(gap['score_gap'])} "
            f"(se {_fmt(gap['se_score_gap'])})"
        )
        add(
            f"- ability component {_fmt(gap['ability_component'])}, endurance component "
            f"{_fmt(gap['endurance_component'])}"
        )
        add(
            f"- halving position effects changes the gap by {_fmt(gap['reform_delta_pp'])} "
            f"({_fmt(100 * gap['reform_delta_pct']) if pd.notna(gap['reform_delta_pct']) else '-'}% "
            f"of the gap)"
        )
        add("")

    if (out / F_VALIDITY).exists():
        val = pd.read_csv(out / F_VALIDITY)
        w = 1.0 / val["se_rho"] ** 2
        agg = val.assign(w=w, wrho=w * val["rho"]).groupby("position")[["w", "wrho"]].sum()
        fig = pd.DataFrame(
            {
                "position": agg.index.to_numpy(),
                "mean_rho": (agg["wrho"] / agg["w"]).to_numpy(),
                "n_cells": val.groupby("position").size().reindex(agg.index).to_numpy(),
            }
        )
        _write_csv(fig, out / "fig_validity_by_position.csv")
        files.append("fig_validity_by_position.csv")
        add("## Question-level predictive validity")
        add("")
        add(
            f"- {len(val)} question-booklet cells for outcome `{val['outcome'].iloc[0]}`; "
            f"mean validity {_fmt(np.average(val['rho'], weights=w))}"
        )
        if (out / F_VALIDITY_REFORM).exists():
            vr = pd.read_csv(out / F_VALIDITY_REFORM).iloc[0]
            add(
                f"- within-question slope {_fmt(vr['gamma_per_position'])} per position "
                f"(t = {_fmt(vr['t_stat'])} for the halving counterfactual)"
            )
            if pd.notna(vr["pct_of_mean"]):
                add(
                    f"- halving positions would raise mean validity by "
                    f"{_fmt(100 * vr['pct_of_mean'])}%"
                )
        add("")

    if (out / F_NONRESPONSE).exists():
        nr = pd.read_csv(out / F_NONRESPONSE)
        add("## Nonresponse")
        add("")
        add(f"- overall unanswered share {_fmt(nr['fraction_unanswered'].mean())}")
        add("")

    (out / F_SUMMARY).write_text("\n".join(lines) + "\n", encoding="utf-8")
    files.append(F_SUMMARY)
    manifest_mod.record_stage(out, "report", files)
    print(f"report: wrote {F_SUMMARY} and {len(files) - 1} figure tables")
    return EXIT_OK


# ---------------------------------------------------------------------------
# identity checks


EXACT_SPECS = ("baseline", "day_fe", "subject_fe")


def _run_checks(out, man, cfg, design, responses, est, table) -> list[str]:
    """Internal-consistency checks; returns failure descriptions."""
    failures: list[str] = []

    def report(name: str, ok: bool, detail: str) -> None:
        print(f"[{'ok' if ok else 'FAIL'}] {name}: {detail}")
        if not ok:
            failures.append(f"{name}: {detail}")

    # 1. decomposition must reproduce each student's observed score
    if est.spec.split("+")[0] in EXACT_SPECS:
        implied = decompose_mod.implied_score(est)
        order = np.argsort(responses.student_ids, kind="stable")
        pos = np.searchsorted(responses.student_ids[order], est.student_ids)
        observed = responses.fraction_correct()[order[pos]]
        worst = float(np.abs(implied - observed).max()) if est.n_students else 0.0
        report("score_identity", worst <= 1e-8, f"max |implied - observed| = {worst:.3g}")
    else:
        print(f"[skip] score_identity: not exact for spec {est.spec!r}")

    # 2. batch estimates must match single-student recomputation
    if "+shrunk" not in est.spec and est.n_students:
        rng = synth.keyed_rng(int(man["seed"]), "check", "sample")
        k = min(25, est.n_students)
        sample = rng.choice(est.student_ids, size=k, replace=False)
        kwargs = dict(
            difficulty=table,
            spec=est.spec,
            demean=cfg.get("estimate.demean", "per_booklet"),
            min_items=int(cfg.get("estimate.min_items", 10)),
            min_positions=int(cfg.get("estimate.min_positions", 3)),
        )
        worst = 0.0
        for sid in sorted(int(s) for s in sample):
            row = decompose_mod.decompose_student(responses, sid, **kwargs)
            i = int(np.searchsorted(est.student_ids, sid))
            for got, want in (
                (est.alpha_hat[i], row.alpha_hat),
                (est.beta_hat[i], row.beta_hat),
                (est.se_alpha[i], row.se_alpha),
                (est.se_beta[i], row.se_beta),
            ):
                worst = max(worst, abs(float(got) - float(want)))
            if not (np.isnan(est.delta_hat[i]) and np.isnan(row.delta_hat)):
                worst = max(worst, abs(float(est.delta_hat[i]) - float(row.delta_hat)))
        report(
            "single_student_recompute",
            worst <= 1e-9,
            f"max discrepancy over {k} students = {worst:.3g}",
        )

    # 3. stored difficulty must satisfy its own construction
    diff_path = out / F_DIFFICULTY
    if diff_path.exists():
        frame = _read_frame(diff_path, ("method", "difficulty"))
        lhs = _column(frame, "difficulty", diff_path)
        rhs = _column(frame, "fraction_correct_raw", diff_path) - _column(
            frame, "position_effect_used", diff_path
        ) * _column(frame, "avg_position", diff_path)
        worst = float(np.abs(lhs - rhs).max())
        report("difficulty_identity", worst <= 1e-10, f"max residual = {worst:.3g}")

    # 4. per-question validities must aggregate to the score correlation
    val_path = out / F_VALIDITY
    if val_path.exists():
        vframe = pd.read_csv(val_path)
        label = str(vframe["outcome"].iloc[0])
        if label != "score_loo":
            outcomes_path = out / F_OUTCOMES
            outcomes = frame_to_outcomes(
                _read_frame(outcomes_path, ("student_id", "log_wage")), outcomes_path
            )
            validity = analysis.ValidityTable(
                outcome_label=label,
                question_id=_int_column(vframe, "question_id", val_path),
                booklet=_int_column(vframe, "booklet", val_path),
                day=_int_column(vframe, "day", val_path),
                position=_int_column(vframe, "position", val_path),
                n_students=_int_column(vframe, "n_students", val_path),
                fraction_correct=_column(vframe, "fraction_correct", val_path),
                rho=_column(vframe, "rho", val_path),
                se_rho=_column(vframe, "se_rho", val_path),
                n_skipped_small=0,
                n_skipped_degenerate=0,
            )
            worst = analysis.validity_aggregation_check(validity, responses, outcomes)
            report("validity_aggregation", worst <= 1e-8, f"max discrepancy = {worst:.3g}")

    return failures


def cmd_check(args) -> int:
    out = Path(args.out)
    man, cfg = _load_run(out)
    manifest_mod.require_stage(man, "decompose", out)
    design = _read_design(out)
    responses = _read_responses(out, design)
    est = _read_estimates(out)
    table = _read_difficulty_table(out, cfg)
    failures = _run_checks(out, man, cfg, design, responses, est, table)
    if failures:
        print(f"check: {len(failures)} failure(s)", file=sys.stderr)
        return EXIT_IDENTITY
    print("check: all identities hold")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    for fn in (cmd_simulate, cmd_estimate, cmd_decompose, cmd_analyze, cmd_report, cmd_check):
        rc = fn(args)
        if rc != EXIT_OK:
            return rc
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="examdecomp",
        description="simulate randomized-booklet exams and decompose scores "
        "into ability and endurance",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", required=True, help="run output directory")
        if config:
            p.add_argument("--config", help="configuration file (key = value lines)")
            p.add_argument("--seed", type=int, help="override the config seed")
        p.set_defaults(func=fn, check_identities=False)
        return p

    add("simulate", cmd_simulate, "draw the exam, cohort, responses and outcomes", config=True)
    add("estimate", cmd_estimate, "estimate difficulty and mean position effects")
    p = add("decompose", cmd_decompose, "estimate per-student ability and endurance")
    p.add_argument(
        "--check-identities",
        action="store_true",
        help="verify score and recomputation identities after writing estimates",
    )
    add("analyze", cmd_analyze, "returns, gaps and question validity")
    add("report", cmd_report, "write summary.md and figure tables")
    add("check", cmd_check, "verify internal-consistency identities")
    add("pipeline", cmd_pipeline, "run every stage in order", config=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalid, ParamInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, IoFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ExamDecompError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
