class FedSLError(Exception):
    """Base class for simulator errors."""


class ValidationError(FedSLError, ValueError):
    pass


class DimensionError(ValidationError):
    pass


class NumericError(FedSLError, ArithmeticError):
    pass


class InfeasibleError(FedSLError):
    """A deadline or link that cannot be met with the given resources."""


class SchedulingError(FedSLError):
    pass


class SimulationError(FedSLError):
    def __init__(self, message, event=None):
        super().__init__(message)
        self.event = event


class ConfigError(ValidationError):
    def __init__(self, message, pointer: str = ""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer
