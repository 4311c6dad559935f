"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so subcommands must let them
propagate rather than catching broadly.
"""


class FlowPromptError(Exception):
    """Base class for all package errors."""


class InputError(FlowPromptError):
    """A caller-supplied value violates a documented precondition."""


class ConfigError(FlowPromptError):
    """Invalid, inconsistent, or unknown configuration."""


class DataError(FlowPromptError):
    """Bad data on disk or an ill-formed dataset (schema, format, stats)."""


class NumericError(FlowPromptError):
    """A numeric failure (NaN/Inf) surfaced during compute."""
