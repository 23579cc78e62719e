"""
Error Types
Shared exception hierarchy for the simulator
"""


class FedGenError(Exception):
    """Base class for every error raised by the simulator"""


class ConfigError(FedGenError, ValueError):
    """Invalid model, schedule, accountant or experiment configuration"""


class ArgumentError(FedGenError, ValueError):
    """An operation was called with an out-of-range argument"""


class IngestionError(FedGenError):
    """Dataset files are missing or corrupt"""

    def __init__(self, message: str, path: str = None):
        super().__init__(message)
        self.path = path


class DatasetValidationError(FedGenError, ValueError):
    """Dataset contents violate the label or pixel-range contract"""


class PartitionError(FedGenError):
    """The requested client partition cannot be built"""


class BudgetExhaustedError(FedGenError):
    """The privacy budget runs out before the requested number of steps"""

    def __init__(self, message: str, spendable_steps: int):
        super().__init__(message)
        self.spendable_steps = spendable_steps


class CalibrationError(FedGenError):
    """No noise multiplier in the search bracket meets the target epsilon"""


class NumericError(FedGenError, ArithmeticError):
    """A training step produced non-finite values"""


class ProtocolError(FedGenError):
    """The one-shot protocol was violated or cannot proceed"""


class AggregationError(FedGenError):
    """Client models cannot be combined"""


class FilterError(FedGenError):
    """Synthetic data filtering is missing required inputs"""

    def __init__(self, message: str, client_id: int = None):
        super().__init__(message)
        self.client_id = client_id
