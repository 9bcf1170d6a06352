"""Metrics, experiment drivers and the invariant check suite."""

from .metrics import MTRE, MetricReport, dice, evaluate_pairs, mtre
from .noise import InverseNotConverged, NoiseEstimate, fixed_point_inverse, noise_hypothesis

__all__ = [
    "MTRE",
    "MetricReport",
    "dice",
    "mtre",
    "evaluate_pairs",
    "NoiseEstimate",
    "InverseNotConverged",
    "fixed_point_inverse",
    "noise_hypothesis",
]
