"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DefogSegError(Exception):
    exit_code = 1


class ConfigError(DefogSegError, ValueError):
    exit_code = 2


class DataError(DefogSegError):
    exit_code = 3


class IntegrityError(DataError):
    """A file referenced by a manifest is missing or unreadable."""


class NumericError(DefogSegError, ValueError):
    exit_code = 4


class DimensionError(DefogSegError, ValueError):
    exit_code = 2


class DomainError(DefogSegError, ValueError):
    exit_code = 2


class SpliceError(DefogSegError, KeyError):
    exit_code = 2

    def __str__(self):
        # KeyError.__str__ wraps the message in quotes
        return Exception.__str__(self)


class ContractError(DefogSegError):
    exit_code = 2
