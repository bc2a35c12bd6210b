"""Rectified-flow image-editing algorithms reproduced on 2-D Gaussian mixtures."""

__version__ = "0.1.0"

from .editing import (EditRequest, EditResult, direct_path_edit, flowedit, flowedit_expectation,
                      flowedit_scaled, invert_edit, sdedit)
from .field import ConditionedModel, GuidedModel, guided_velocity, noise_pred_to_velocity, velocity, \
    velocity_to_noise_pred
from .gmm import GaussianMixture, analytic_velocity, sample
from .ode import Schedule, integrate_forward, integrate_reverse

__all__ = [
    "ConditionedModel", "EditRequest", "EditResult", "GaussianMixture", "GuidedModel", "Schedule",
    "analytic_velocity", "direct_path_edit", "flowedit", "flowedit_expectation", "flowedit_scaled",
    "guided_velocity", "integrate_forward", "integrate_reverse", "invert_edit",
    "noise_pred_to_velocity", "sample", "sdedit", "velocity", "velocity_to_noise_pred",
]
