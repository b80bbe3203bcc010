"""Open-vocabulary goal navigation at desk scale: semantic/language/vision
top-down maps, a goal-conditioned long-term-goal policy, an FMM local
planner, and a synthetic gridworld to run it all in."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DataError,
    OvnavError,
    PlannerError,
    SimulationError,
    TrainingError,
)
from .gridcore import GridMap, GridSpec, Pose
from .planner import Action

__all__ = [
    "Action",
    "ConfigurationError",
    "DataError",
    "GridMap",
    "GridSpec",
    "OvnavError",
    "PlannerError",
    "Pose",
    "SimulationError",
    "TrainingError",
    "__version__",
]
