"""Exception hierarchy shared across the package.

Every error carries a machine-readable ``error_class`` string so the CLI can
emit structured failures and map them to stable exit codes.
"""


class OvnavError(Exception):
    error_class = "error"
    exit_code = 1


class ConfigurationError(OvnavError):
    """Invalid configuration: bad ranges, indivisible sizes, dim mismatches."""

    error_class = "configuration_error"
    exit_code = 2


class DataError(OvnavError):
    """Invalid or missing data artifacts: datasets, episodes, checkpoints."""

    error_class = "data_error"
    exit_code = 3


class PlannerError(OvnavError):
    """Planning failed: unreachable source/goal, no reachable cell."""

    error_class = "planner_error"
    exit_code = 4


class TrainingError(OvnavError):
    """Training aborted (e.g. NaN loss); message carries a diagnostics snapshot."""

    error_class = "training_error"
    exit_code = 5


class SimulationError(OvnavError):
    """Illegal simulator transition (acting after termination) or scene
    generation giving up after bounded retries."""

    error_class = "simulation_error"
    exit_code = 6
