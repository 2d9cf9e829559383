"""Sampler tools package."""

from .sampler_tools import (
    consistency_report,
    draw_samples,
    evaluate_samples,
    ground_truth,
    init,
    snis_report,
)

__all__ = [
    "draw_samples",
    "evaluate_samples",
    "consistency_report",
    "snis_report",
    "ground_truth",
    "init",
]
