"""
Typed errors for the pruning bench.

Every error carries the process exit code main.py should return for it.
"""


class EagleEyeError(Exception):
    exit_code = 1


class ConfigError(EagleEyeError):
    exit_code = 2


class DataError(EagleEyeError):
    exit_code = 3


class DataFormatError(DataError):
    pass


class TruncatedFileError(DataFormatError):
    def __init__(self, path, expected, actual):
        super().__init__(
            f"{path}: truncated file, expected {expected} bytes but found {actual}"
        )
        self.path = path
        self.expected = expected
        self.actual = actual


class NumericError(EagleEyeError):
    exit_code = 4


class ShapeError(EagleEyeError, ValueError):
    pass


class ModeError(EagleEyeError):
    pass


class LayerError(EagleEyeError):
    pass


class PruningError(EagleEyeError):
    pass


class InfeasibleTargetError(ConfigError):
    pass


class CheckpointError(EagleEyeError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class UndefinedCorrelationError(EagleEyeError, ValueError):
    pass
