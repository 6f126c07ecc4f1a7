"""Residual networks trained with stochastic depth, in plain numpy."""
from .depth import SurvivalSchedule, ensemble_oracle, expected_depth, sample_gates, savings_estimate
from .resnet import ConstantDepth, NetworkSpec, ResNet, TestRescaled, TrainGated

__version__ = "0.1.0"

__all__ = [
    "ConstantDepth",
    "NetworkSpec",
    "ResNet",
    "SurvivalSchedule",
    "TestRescaled",
    "TrainGated",
    "ensemble_oracle",
    "expected_depth",
    "sample_gates",
    "savings_estimate",
]
