"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes.
"""


class Ad2Error(Exception):
    exit_code = 1


class InvalidInputError(Ad2Error, ValueError):
    """Argument violates an operation's precondition."""

    exit_code = 3


class InvariantError(Ad2Error, RuntimeError):
    """An internal invariant was broken (shape overflow, non-finite loss, ...)."""

    exit_code = 3


class ConfigError(Ad2Error):
    exit_code = 2


class RegistrationError(Ad2Error):
    """A tracker adapter lacks a required capability."""

    exit_code = 2


class DataError(Ad2Error, OSError):
    exit_code = 4
