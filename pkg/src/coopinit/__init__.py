"""Numpy-only CNN library for two-phase training with a mixture-activation warm-up."""

from .activations import ActivationSpec, MixedActivation, default_mixture, parse_activation
from .network import Network, build, init_weights, set_all_slots
from .optim import SGD, StepSchedule, lr_at
from .trainer import TrainPlan, run_plan

__version__ = "0.1.0"

__all__ = [
    "ActivationSpec", "MixedActivation", "default_mixture", "parse_activation",
    "Network", "build", "init_weights", "set_all_slots",
    "SGD", "StepSchedule", "lr_at", "TrainPlan", "run_plan",
]
