"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes (see cli.py): config problems
exit 2, data problems 3, divergence 4, checkpoint incompatibility 5.
"""


class HazeflowError(Exception):
    """Base class for all package errors."""


class ValidationError(HazeflowError, ValueError):
    """A spec, argument, or array violated a documented precondition."""


class ConfigError(HazeflowError):
    """Experiment configuration could not be parsed or is inconsistent."""


class DataError(HazeflowError):
    """Dataset, prediction, or report files are missing or malformed."""


class TrainingDivergenceError(HazeflowError):
    """Training produced a non-finite loss."""


class IntegrationDivergenceError(HazeflowError):
    """ODE integration produced a non-finite state; message names the step."""


class CheckpointIncompatibilityError(HazeflowError):
    """Checkpoint contents do not match the requested architecture/config."""
