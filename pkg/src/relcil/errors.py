"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller broke an operation's precondition (shape, range, ordering)."""


class ConfigError(ValueError):
    """An experiment or stream configuration is inconsistent."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value or failed to converge."""

    def __init__(self, message, stage=None, residual=None):
        super().__init__(message)
        self.stage = stage
        self.residual = residual


class ParseError(ValueError):
    """Malformed dataset file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
