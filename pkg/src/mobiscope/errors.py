"""Exception hierarchy. Each family maps onto a CLI exit code."""


class MobiscopeError(Exception):
    exit_code = 4


class ConfigError(MobiscopeError):
    exit_code = 2


class DataError(MobiscopeError):
    exit_code = 3


class InvalidCoordinateError(DataError, ValueError):
    pass


class GranularityError(DataError, ValueError):
    pass


class RowError(DataError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class PrivacyViolationError(DataError):
    """A phone trace spans more than the 24 hour tracking cap."""


class EmptyInputError(DataError, ValueError):
    pass


class ContractError(MobiscopeError, ValueError):
    """Caller broke a precondition (mismatched frames, undefined home, ...)."""


class DoubleCountError(ContractError):
    pass


class GenerationError(MobiscopeError):
    exit_code = 2
