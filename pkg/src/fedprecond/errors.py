"""Exception hierarchy shared by every module."""


class FedPrecondError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(FedPrecondError, ValueError):
    """An operation was called with arguments outside its precondition."""


class NumericFailure(FedPrecondError, ArithmeticError):
    """A numeric routine failed to converge or produced non-finite values."""


class ConfigError(FedPrecondError, ValueError):
    """Invalid experiment configuration or infeasible data arithmetic."""


class ConfigSyntaxError(ConfigError):
    """The configuration file is not a well-formed JSON object."""


class UnknownKeyError(ConfigError):
    def __init__(self, key: str):
        super().__init__(f"unknown configuration key: {key!r}")
        self.key = key


class ConfigInvariantError(ConfigError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ClientFailure(FedPrecondError):
    """A client produced a non-finite loss or gradient; the run is aborted."""

    def __init__(self, round_index: int, client: int, message: str):
        super().__init__(f"round {round_index}, client {client}: {message}")
        self.round_index = round_index
        self.client = client

    def to_record(self) -> dict:
        return {
            "type": "error",
            "error": type(self).__name__,
            "round": self.round_index,
            "client": self.client,
            "message": str(self),
        }
