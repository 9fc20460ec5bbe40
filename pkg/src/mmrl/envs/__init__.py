from __future__ import annotations

from .core import (
    TASKS,
    PomgState,
    StepResult,
    TaskConfig,
    detect_events,
    env_seed,
    obs_width,
    observe,
    reset,
    step,
)

# task modules register themselves on import
from . import dispersion, pressure_plate, wind_flocking  # noqa: E402,F401  isort: skip
from .batch import step_batch  # noqa: E402
from .perturb import PerturbationPlan, apply_perturbation, parse_perturbations  # noqa: E402

__all__ = [
    "TASKS",
    "PerturbationPlan",
    "PomgState",
    "StepResult",
    "TaskConfig",
    "apply_perturbation",
    "detect_events",
    "env_seed",
    "obs_width",
    "observe",
    "parse_perturbations",
    "reset",
    "step",
    "step_batch",
]
