"""Exception types shared across modules.

User-facing errors (bad input, bad config, unparsable files) map to CLI exit
code 1; ``ContractError`` marks internal invariant failures (exit code 2).
"""

from .numerics.autograd import ContractError


class InputDomainError(ValueError):
    """A value lies outside the domain an operation accepts."""


class ConfigError(ValueError):
    """A configuration cannot be satisfied."""


class ParseError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


__all__ = ["ConfigError", "ContractError", "InputDomainError", "ParseError"]
