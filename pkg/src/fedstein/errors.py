"""Exception hierarchy shared across the package."""


class FedSteinError(Exception):
    pass


class DimensionError(FedSteinError, ValueError):
    """Shapes that cannot be combined."""


class NumericError(FedSteinError, ArithmeticError):
    """Non-finite values, division by zero, negative variances."""


class EmptyReductionError(FedSteinError, ValueError):
    pass


class DegenerateBatchError(FedSteinError, ValueError):
    """A train-mode batch norm saw fewer than two samples."""


class ContractError(FedSteinError, RuntimeError):
    """An operation was called outside its precondition (e.g. backward on an eval cache)."""


class ProtocolError(FedSteinError, RuntimeError):
    """A global update carries a tensor kind the strategy forbids."""


class FormatError(FedSteinError, ValueError):
    """Malformed IDX, CSV, or checkpoint file."""


class CountMismatchError(FormatError):
    pass


class ConfigError(FedSteinError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointMismatchError(FedSteinError, RuntimeError):
    pass
