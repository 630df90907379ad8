"""Exception hierarchy shared by all anatomia modules.

The CLI maps these onto process exit codes (config 2, data 3, divergence 4);
the HTTP service maps them onto structured error payloads.
"""


class AnatomiaError(Exception):
    """Base class for all package errors."""

    kind = "internal"


class ConfigError(AnatomiaError):
    """Invalid configuration: bad field values, missing files, bad overrides."""

    kind = "config"


class DataError(AnatomiaError):
    """Invalid or inconsistent data: malformed archives, shape mismatches."""

    kind = "data"


class DivergenceError(AnatomiaError):
    """Training produced a non-finite loss."""

    kind = "divergence"
