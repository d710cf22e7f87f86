"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, training 4).
"""


class DepthPatchError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(DepthPatchError):
    """Invalid configuration: bad ranges, missing backends, contradictory flags."""

    exit_code = 2


class DataError(DepthPatchError):
    """Broken inputs: unreadable images, malformed annotations, shape mismatches."""

    exit_code = 3


class TrainingError(DepthPatchError):
    """Optimization failure: divergence, empty detection sets, dead runs."""

    exit_code = 4
