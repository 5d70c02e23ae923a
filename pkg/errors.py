"""
Exception types shared across the pipeline.

Each error carries the process exit code main.py returns for it.
"""


class KwsError(Exception):
    """Base class for all pipeline errors"""
    exit_code = 1


class ConfigError(KwsError):
    """Invalid configuration, unknown keys, missing list files"""
    exit_code = 2


class DataError(KwsError):
    """Bad manifest rows, unreadable audio, degenerate inputs"""
    exit_code = 3


class NumericError(KwsError):
    """Non-finite values in losses, gradients or features"""
    exit_code = 4
