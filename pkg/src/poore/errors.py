class ConfigError(ValueError):
    """Bad configuration or input data; the CLI maps this to exit code 2."""


class NumericError(ArithmeticError):
    """Non-finite loss, parameter, or degenerate numeric state; exit code 3."""

    def __init__(self, message: str, term: str | None = None, step: int | None = None):
        super().__init__(message)
        self.term = term
        self.step = step
