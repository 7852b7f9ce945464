"""Exception types. Each family maps to one CLI exit code."""


class GazeAttendError(Exception):
    exit_code = 1


class ConfigError(GazeAttendError, ValueError):
    exit_code = 2


class DataError(GazeAttendError, ValueError):
    exit_code = 3


class NumericalError(GazeAttendError, ArithmeticError):
    exit_code = 4
