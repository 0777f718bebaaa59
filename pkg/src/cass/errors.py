class CassError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(CassError, ValueError):
    """Input data is malformed (non-finite values, wrong channel count...)."""


class ContractError(CassError, ValueError):
    """A precondition on shapes or arguments is violated."""


class ConfigError(CassError, ValueError):
    """A configuration cannot be satisfied by the data at hand."""


class RegistryError(CassError, KeyError):
    """Unknown model variant."""


class DivergenceError(CassError, RuntimeError):
    """Training produced NaN or left the valid loss range; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
