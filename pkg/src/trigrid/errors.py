"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Caller passed arguments that violate an operation's preconditions."""


class InvalidStateError(RuntimeError):
    """An object reached a state that cannot be evaluated (non-finite values, bad geometry)."""


class ParseError(ValueError):
    """A file did not match its declared binary or text format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(InvalidStateError):
    """Optimization produced a non-finite loss.

    ``last_good_iteration`` is the last step whose loss was finite (-1 if none).
    """

    def __init__(self, message, last_good_iteration=-1, diagnostics=None):
        super().__init__(f"{message} (last good iteration: {last_good_iteration})")
        self.last_good_iteration = last_good_iteration
        self.diagnostics = diagnostics or {}
