"""Exception taxonomy shared across the package.

Every error raised on a documented failure path derives from
:class:`ExamDecompError` so callers (and the command-line driver) can map
failures to exit codes without string matching.
"""

from __future__ import annotations


class ExamDecompError(Exception):
    """Base class for all package-specific errors."""


# ---------------------------------------------------------------------------
# configuration / input plumbing


class ConfigInvalid(ExamDecompError):
    """A run configuration is malformed (unknown key, bad value, bad type)."""


class MissingInput(ExamDecompError):
    """A pipeline stage requires a file or table that is not present."""


class IoFailure(ExamDecompError):
    """A CSV or manifest could not be read or failed row-level validation."""


# ---------------------------------------------------------------------------
# linear-model engine


class DimensionMismatch(ExamDecompError):
    """Arrays passed to an estimator do not line up row-wise or column-wise."""


class NonFiniteInput(ExamDecompError):
    """NaN or infinity encountered where finite values are required."""


class RankDeficient(ExamDecompError):
    """The design matrix does not have full column rank at the pivot tolerance."""


class SingleCluster(ExamDecompError):
    """Cluster-robust covariance requested with fewer than two clusters."""


class UnderIdentified(ExamDecompError):
    """Two-stage least squares with fewer instruments than endogenous columns."""


class DenominatorNearZero(ExamDecompError):
    """Ratio delta method requested with a denominator too close to zero."""


# ---------------------------------------------------------------------------
# simulator


class ParamInvalid(ExamDecompError):
    """A simulator parameter is outside its admissible range."""


class ModelMismatch(ExamDecompError):
    """A response model was requested without the inputs it needs."""


# ---------------------------------------------------------------------------
# estimation on exam data


class Empty(ExamDecompError):
    """An operation received no usable rows."""


class InsufficientBooklets(ExamDecompError):
    """Position effects need at least two booklets with distinct orderings."""


class MethodUnknown(ExamDecompError):
    """An unrecognised method or specification label was requested."""


class DegenerateVariance(ExamDecompError):
    """A variance needed for shrinkage or moment correction is not positive."""


class NoWithinVariation(ExamDecompError):
    """No within-question position variation, so a position slope is unidentified."""


class MissingDifficulty(ExamDecompError):
    """A question in the estimation sample has no difficulty entry."""


class NoPairs(ExamDecompError):
    """Booklet-pair contrasts have no position variation to fit a line on."""


class TooFewItems(ExamDecompError):
    """A student has fewer answered items than the decomposition minimum."""


class ZeroPositionVariance(ExamDecompError):
    """A student's items show fewer distinct positions than required."""


class TooFewMatched(ExamDecompError):
    """Too few matched students across sittings for a reliability estimate."""


class EmptyGroup(ExamDecompError):
    """A group comparison was requested where one group has no members."""


class ZeroGap(ExamDecompError):
    """A counterfactual share is undefined because the baseline gap is zero."""


class DegenerateCell(ExamDecompError):
    """A question-booklet cell has no outcome or response variation."""


class WeakInstrument(UserWarning):
    """First-stage F statistic below the conventional strength threshold."""
