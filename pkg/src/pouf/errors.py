"""Exception types shared across the library and mapped to CLI exit codes."""


class ValidationError(ValueError):
    """Bad inputs or configuration (CLI exit code 2)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss (CLI exit code 3)."""

    def __init__(self, message, iteration=None, batch_ids=None):
        super().__init__(message)
        self.iteration = iteration
        self.batch_ids = list(batch_ids) if batch_ids is not None else []


class FormatError(ValueError):
    """Malformed binary or text data file; `offset` is the failing byte/line."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
