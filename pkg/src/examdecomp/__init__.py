"""examdecomp: decompose exam scores into ability and within-day endurance.

Simulates randomized-booklet exams, estimates how accuracy declines with
question position, splits each student's score into an ability level and
an endurance slope, and measures what those two skills predict.
"""

import os as _os

# Honor EXAMDECOMP_THREADS before any numerical library spins up its pools.
_threads = _os.environ.get("EXAMDECOMP_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import analysis, decompose, difficulty, position_effects, regress, synth  # noqa: E402
from .errors import ExamDecompError  # noqa: E402

__all__ = [
    "__version__",
    "ExamDecompError",
    "analysis",
    "decompose",
    "difficulty",
    "position_effects",
    "regress",
    "synth",
]
