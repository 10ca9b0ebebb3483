"""Exception hierarchy shared by every module.

Each class carries the exit code the command-line front end maps it to.
"""


class BddError(Exception):
    exit_code = 1


class ParseError(BddError, ValueError):
    exit_code = 2


class InvalidInputError(BddError, ValueError):
    exit_code = 2


class PreconditionError(BddError):
    exit_code = 3


class NumericalError(BddError):
    exit_code = 4


class DivergenceError(NumericalError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class SizeLimitError(BddError):
    exit_code = 5


class ImprobableFailure(NumericalError):
    """A randomized routine exhausted its retry budget."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
