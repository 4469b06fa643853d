"""Exception types shared across the package."""


class NeoKDError(Exception):
    pass


class DimensionError(NeoKDError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(NeoKDError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ContractError(NeoKDError, RuntimeError):
    """A caller broke an operation's precondition (e.g. non-scalar loss)."""


class ConfigError(NeoKDError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(NeoKDError, ValueError):
    """A file does not match its expected binary layout."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NonFiniteError(NeoKDError, FloatingPointError):
    """NaN or Inf appeared where finite values are required."""
