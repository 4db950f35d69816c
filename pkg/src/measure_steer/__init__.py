"""Feedback-based steering of measures transported by controlled vector fields."""

__version__ = "0.1.0"

from .backends import GridBackend, ParticleBackend, Population, Problem, make_backend
from .fields import ControlFamily, ControlSet, ScalarField, VectorField
from .fmp import FmpParams, fmp_iterate, qualification_check
from .measures import EmpiricalMeasure, GridMeasure, GridSpec, w1_distance
from .pmp import FeedbackLaw, cost_increment, pmp_residual
from .signals import ControlSignal, Partition, TimeGrid

__all__ = [
    "__version__",
    "GridBackend",
    "ParticleBackend",
    "Population",
    "Problem",
    "make_backend",
    "ControlFamily",
    "ControlSet",
    "ScalarField",
    "VectorField",
    "FmpParams",
    "fmp_iterate",
    "qualification_check",
    "EmpiricalMeasure",
    "GridMeasure",
    "GridSpec",
    "w1_distance",
    "FeedbackLaw",
    "cost_increment",
    "pmp_residual",
    "ControlSignal",
    "Partition",
    "TimeGrid",
]
