"""Exception types shared across the simulator."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class DataError(ValueError):
    """Input data is empty, too short, or outside its valid domain."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class EvaluationError(ArithmeticError):
    """A function under gradient check returned a non-finite value."""


class AggregationError(ValueError):
    """Client updates cannot be combined."""


class RoundError(RuntimeError):
    """A federated round failed on a specific client."""

    def __init__(self, client_id, cause):
        super().__init__(f"client {client_id} failed: {cause}")
        self.client_id = client_id
        self.cause = cause
