"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: config/usage problems exit 1, bad
input data exits 2, numeric failures exit 3.
"""


class StadmError(Exception):
    exit_code = 2


class ConfigError(StadmError, ValueError):
    exit_code = 1


class DimensionError(StadmError, ValueError):
    pass


class RangeError(StadmError, ValueError):
    pass


class ParseError(StadmError, ValueError):
    pass


class DataError(StadmError):
    pass


class NumericError(StadmError, ArithmeticError):
    exit_code = 3
