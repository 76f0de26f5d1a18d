"""Run configuration: a strict, flat ``key = value`` text format.

Every key must be known (unknown keys are an error, not a warning: silent
typos in simulation configs are how wrong numbers ship).  Values are
Python literals parsed with :func:`ast.literal_eval`.  Lines starting
with ``#`` and blank lines are ignored.  Example::

    seed = 7
    population.n_students = 20000
    population.corr_alpha_beta = -0.3
    groups.prevalence.female = 0.5
    groups.shift_beta.female = 0.012
    response.model = "linear"
    estimate.spec = "baseline"

Defaults live on the dataclasses in :mod:`examdecomp.synth` /
:mod:`examdecomp.decompose`; a config only records what it overrides,
which keeps the canonical hash stable across releases that add knobs.
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass, field

from . import difficulty as difficulty_mod
from . import synth
from .analysis import OUTCOME_LABELS
from .decompose import DEMEAN_MODES, SPECS
from .errors import ConfigInvalid

# --- value casters ---------------------------------------------------------


def _as_int(key, value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigInvalid(f"{where}: {key} must be an integer, got {value!r}")
    return value


def _as_float(key, value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigInvalid(f"{where}: {key} must be a number, got {value!r}")
    return float(value)


def _as_bool(key, value, where):
    if not isinstance(value, bool):
        raise ConfigInvalid(f"{where}: {key} must be True or False, got {value!r}")
    return value


def _as_str(key, value, where):
    if not isinstance(value, str):
        raise ConfigInvalid(f"{where}: {key} must be a string, got {value!r}")
    return value


def _as_float_pair(key, value, where):
    if (
        not isinstance(value, (tuple, list))
        or len(value) != 2
        or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value)
    ):
        raise ConfigInvalid(f"{where}: {key} must be a pair of numbers, got {value!r}")
    return (float(value[0]), float(value[1]))


def _as_int_pair(key, value, where):
    if (
        not isinstance(value, (tuple, list))
        or len(value) != 2
        or any(isinstance(v, bool) or not isinstance(v, int) for v in value)
    ):
        raise ConfigInvalid(f"{where}: {key} must be a pair of integers, got {value!r}")
    return (value[0], value[1])


def _as_float_tuple(key, value, where):
    if not isinstance(value, (tuple, list)) or any(
        isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
    ):
        raise ConfigInvalid(f"{where}: {key} must be a tuple of numbers, got {value!r}")
    return tuple(float(v) for v in value)


def _as_str_tuple(key, value, where):
    if not isinstance(value, (tuple, list)) or any(
        not isinstance(v, str) for v in value
    ):
        raise ConfigInvalid(f"{where}: {key} must be a tuple of strings, got {value!r}")
    return tuple(value)


def _choice(*allowed):
    def cast(key, value, where):
        value = _as_str(key, value, where)
        if value not in allowed:
            raise ConfigInvalid(
                f"{where}: {key} must be one of {sorted(allowed)}, got {value!r}"
            )
        return value

    return cast


# --- key registry ----------------------------------------------------------

REGISTRY = {
    "seed": _as_int,
    # exam geometry
    "design.days": _as_int,
    "design.questions_per_day": _as_int,
    "design.booklets": _as_int,
    "design.subjects_per_day": _as_int,
    "design.subject_labels": _as_str_tuple,
    "design.length_words_range": _as_int_pair,
    # latent population
    "population.n_students": _as_int,
    "population.mean_alpha": _as_float,
    "population.sd_alpha": _as_float,
    "population.mean_beta": _as_float,
    "population.sd_beta": _as_float,
    "population.corr_alpha_beta": _as_float,
    "population.alpha_bounds": _as_float_pair,
    "population.n_covariates": _as_int,
    # latent question difficulty (fraction-correct scale, mean zero)
    "difficulty.sd": _as_float,
    # response model
    "response.model": _choice("linear", "three_pl"),
    "response.difficulty_loading": _as_float,
    "response.nonresponse.enabled": _as_bool,
    "response.nonresponse.intercept": _as_float,
    "response.nonresponse.slope": _as_float,
    "response.easy_multiplier": _as_float,
    "response.hard_multiplier": _as_float,
    "response.three_pl.discrimination": _as_float,
    "response.three_pl.guessing": _as_float,
    # labor-market outcomes
    "outcomes.psi_ability": _as_float,
    "outcomes.psi_endurance": _as_float,
    "outcomes.sigma_wage": _as_float,
    "outcomes.wage_const": _as_float,
    "outcomes.lambda_controls": _as_float_tuple,
    "outcomes.n_occupations": _as_int,
    "outcomes.n_employers": _as_int,
    "outcomes.n_industries": _as_int,
    "outcomes.n_degrees": _as_int,
    "outcomes.assignment_noise": _as_float,
    "outcomes.occupation_endurance_gradient": _as_float,
    "outcomes.enroll_threshold": _as_float,
    "outcomes.enroll_noise": _as_float,
    "outcomes.cq_ability": _as_float,
    "outcomes.cq_endurance": _as_float,
    "outcomes.cq_noise": _as_float,
    # retest sitting
    "retest.enabled": _as_bool,
    "retest.sd_alpha_transient": _as_float,
    "retest.sd_beta_transient": _as_float,
    # estimation choices
    "difficulty.method": _choice(*difficulty_mod.METHODS),
    "difficulty.holdout": _as_bool,
    "difficulty.holdout_fraction": _as_float,
    "difficulty.holdout_salt": _as_int,
    "estimate.spec": _choice(*SPECS),
    "estimate.demean": _choice(*DEMEAN_MODES),
    "estimate.min_items": _as_int,
    "estimate.min_positions": _as_int,
    "estimate.shrink": _as_bool,
    # analysis choices
    "analysis.outcome": _choice(*OUTCOME_LABELS),
    "analysis.controls": _as_bool,
    "analysis.precision_weights": _as_bool,
    "analysis.skill_scale": _choice("sample", "latent"),
    "analysis.iv_scale": _choice("sample", "latent"),
    "analysis.group_field": _choice(
        "occupation_id", "employer_id", "industry_id", "degree_id"
    ),
    "analysis.min_group_n": _as_int,
    "analysis.gap_flag": _as_str,
    "analysis.gap_variant": _choice("unconditional", "regression_adjusted"),
    "analysis.reform_factor": _as_float,
    "analysis.validity_outcome": _choice(*OUTCOME_LABELS, "score_loo"),
    "analysis.validity_min_cell": _as_int,
}

# group composition keys carry the flag name in the last segment
WILDCARDS = {
    "groups.prevalence.": _as_float,
    "groups.shift_alpha.": _as_float,
    "groups.shift_beta.": _as_float,
}


def _caster_for(key: str, where: str):
    if key in REGISTRY:
        return REGISTRY[key]
    for prefix, caster in WILDCARDS.items():
        if key.startswith(prefix) and len(key) > len(prefix):
            return caster
    raise ConfigInvalid(f"{where}: unknown configuration key {key!r}")


def parse_config_text(text: str, source: str = "<config>") -> "RunConfig":
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        key, sep, rhs = line.partition("=")
        key, rhs = key.strip(), rhs.strip()
        if not sep or not key or not rhs:
            raise ConfigInvalid(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key in values:
            raise ConfigInvalid(f"{where}: duplicate key {key!r}")
        caster = _caster_for(key, where)
        try:
            literal = ast.literal_eval(rhs)
        except (ValueError, SyntaxError):
            raise ConfigInvalid(f"{where}: value for {key} is not a Python literal: {rhs!r}")
        values[key] = caster(key, literal, where)
    return RunConfig(values=values)


def parse_config_file(path) -> "RunConfig":
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}")
    return parse_config_text(text, source=str(path))


# --- resolved configuration ------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Parsed overrides plus builders for the simulation config objects."""

    values: dict = field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def _kwargs(self, mapping: dict[str, str]) -> dict:
        return {
            attr: self.values[key] for key, attr in mapping.items() if key in self.values
        }

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    def canonical_text(self) -> str:
        return "".join(f"{k} = {self.values[k]!r}\n" for k in sorted(self.values))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def design(self) -> synth.DesignConfig:
        cfg = synth.DesignConfig(
            **self._kwargs(
                {
                    "design.days": "days",
                    "design.questions_per_day": "questions_per_day",
                    "design.booklets": "booklets",
                    "design.subjects_per_day": "subjects_per_day",
                    "design.subject_labels": "subject_labels",
                    "design.length_words_range": "length_words_range",
                }
            )
        )
        cfg.validate()
        return cfg

    def latents(self) -> synth.LatentConfig:
        flags = sorted(
            key[len("groups.prevalence."):]
            for key in self.values
            if key.startswith("groups.prevalence.")
        )
        kwargs = self._kwargs(
            {
                "population.n_students": "n_students",
                "population.mean_alpha": "mean_alpha",
                "population.sd_alpha": "sd_alpha",
                "population.mean_beta": "mean_beta",
                "population.sd_beta": "sd_beta",
                "population.corr_alpha_beta": "corr_alpha_beta",
                "population.alpha_bounds": "alpha_bounds",
                "population.n_covariates": "n_covariates",
            }
        )
        kwargs["flags"] = {f: self.values[f"groups.prevalence.{f}"] for f in flags}
        shifts = {}
        for f in flags:
            sa = self.values.get(f"groups.shift_alpha.{f}", 0.0)
            sb = self.values.get(f"groups.shift_beta.{f}", 0.0)
            if sa != 0.0 or sb != 0.0:
                shifts[f] = (sa, sb)
        kwargs["shifts"] = shifts
        for key in self.values:
            for kind in ("shift_alpha", "shift_beta"):
                prefix = f"groups.{kind}."
                if key.startswith(prefix) and key[len(prefix):] not in flags:
                    raise ConfigInvalid(
                        f"{key}: shift for flag without groups.prevalence.{key[len(prefix):]}"
                    )
        cfg = synth.LatentConfig(**kwargs)
        cfg.validate()
        return cfg

    @property
    def difficulty_sd(self) -> float:
        return float(self.values.get("difficulty.sd", 0.10))

    def response(self, item_params=None) -> synth.ResponseConfig:
        nonresponse = None
        if self.values.get("response.nonresponse.enabled", False):
            nonresponse = (
                float(self.values.get("response.nonresponse.intercept", -4.0)),
                float(self.values.get("response.nonresponse.slope", 2.0)),
            )
        kwargs = self._kwargs(
            {
                "response.model": "model",
                "response.difficulty_loading": "difficulty_loading",
                "response.easy_multiplier": "easy_multiplier",
                "response.hard_multiplier": "hard_multiplier",
            }
        )
        cfg = synth.ResponseConfig(
            nonresponse=nonresponse, item_params=item_params, **kwargs
        )
        cfg.validate()
        return cfg

    def outcomes(self, n_covariates: int) -> synth.OutcomeConfig:
        cfg = synth.OutcomeConfig(
            **self._kwargs(
                {
                    "outcomes.psi_ability": "psi_ability",
                    "outcomes.psi_endurance": "psi_endurance",
                    "outcomes.sigma_wage": "sigma_wage",
                    "outcomes.wage_const": "wage_const",
                    "outcomes.lambda_controls": "lambda_controls",
                    "outcomes.n_occupations": "n_occupations",
                    "outcomes.n_employers": "n_employers",
                    "outcomes.n_industries": "n_industries",
                    "outcomes.n_degrees": "n_degrees",
                    "outcomes.assignment_noise": "assignment_noise",
                    "outcomes.occupation_endurance_gradient": "occupation_endurance_gradient",
                    "outcomes.enroll_threshold": "enroll_threshold",
                    "outcomes.enroll_noise": "enroll_noise",
                    "outcomes.cq_ability": "cq_ability",
                    "outcomes.cq_endurance": "cq_endurance",
                    "outcomes.cq_noise": "cq_noise",
                }
            )
        )
        cfg.validate(n_covariates)
        return cfg

    @property
    def retest_enabled(self) -> bool:
        return bool(self.values.get("retest.enabled", False))

    def retest(self) -> synth.RetestConfig:
        cfg = synth.RetestConfig(
            **self._kwargs(
                {
                    "retest.sd_alpha_transient": "sd_alpha_transient",
                    "retest.sd_beta_transient": "sd_beta_transient",
                }
            )
        )
        cfg.validate()
        return cfg
