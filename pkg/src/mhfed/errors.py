"""Error taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class ConfigError(Exception):
    """A config file or config value is invalid. CLI exit code 2."""


class DataError(Exception):
    """Input data is missing, malformed, or unusable. CLI exit code 3."""


class NumericalError(Exception):
    """Training produced a non-finite quantity. CLI exit code 4."""
