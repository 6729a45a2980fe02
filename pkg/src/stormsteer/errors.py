"""Exception hierarchy shared by every stage.

Each class carries the CLI exit code it maps to.
"""


class StormsteerError(Exception):
    exit_code = 1


class ConfigurationError(StormsteerError):
    exit_code = 2


class ValidationError(StormsteerError):
    exit_code = 2


class MissingDependencyError(StormsteerError):
    """An upstream artifact is absent; ``stage`` names the stage to run."""

    exit_code = 3

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class StateError(StormsteerError):
    exit_code = 3


class NumericalError(StormsteerError):
    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class DynamicsError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass


class SamplingError(NumericalError):
    pass


class GuidanceError(NumericalError):
    pass


class AttackError(NumericalError):
    pass
