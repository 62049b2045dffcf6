"""
Error hierarchy shared by every app.

Each family carries the process exit code the CLI reports for it.
"""


class SpecmatchError(Exception):
    exit_code = 1


class ConfigError(SpecmatchError):
    """Usage or configuration problem, detected before any work starts."""
    exit_code = 2


class DataError(SpecmatchError):
    """Bad or missing input data (mesh files, caches, manifests, checkpoints)."""
    exit_code = 3


class NumericalError(SpecmatchError):
    """Non-convergence, non-finite values, singular systems."""
    exit_code = 4
