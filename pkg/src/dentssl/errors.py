"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1 (usage),
InvalidInputError / ManifestError / CheckpointError -> 2 (data),
NumericError -> 3 (numeric failure).
"""


class DentSSLError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DentSSLError):
    """Unparseable or inconsistent run configuration."""


class InvalidInputError(DentSSLError):
    """Input data violates an operation's preconditions."""


class ManifestError(DentSSLError):
    """Malformed manifest file or record/payload mismatch."""


class CheckpointError(DentSSLError):
    """Unreadable or incompatible checkpoint container."""


class NumericError(DentSSLError):
    """Non-finite values where finite ones are required."""
