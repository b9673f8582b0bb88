"""Averaged stochastic gradient descent with polynomial steps.

Kernels for the inner loops live in a compiled extension with a numpy
fallback; see ``rpavg._backend``.
"""

from ._backend import BACKEND
from .schedule import NotDiagonalizableError, StepSchedule, rate_exponent

__version__ = "0.1.0"

__all__ = ["BACKEND", "NotDiagonalizableError", "StepSchedule", "rate_exponent", "__version__"]
