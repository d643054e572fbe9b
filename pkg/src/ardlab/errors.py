"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific type that applies instead of a bare ValueError.
"""


class ArdlabError(Exception):
    """Base class for all package-specific failures."""


class SingularCovarianceError(ArdlabError):
    """A covariance that must be invertible for the requested operation is not."""


class GridError(ArdlabError):
    """Invalid timestep grid, or a snapshot time that is not a grid node."""


class DivergenceError(ArdlabError):
    """A numerical state or loss became non-finite or exceeded the guard bound."""


class DatasetFormatError(ArdlabError):
    """A serialized dataset, model, or report could not be parsed."""


class ConfigError(ArdlabError):
    """An experiment configuration is malformed or inconsistent."""


class PresetCheckError(ArdlabError):
    """A preset-internal assertion failed.

    The first argument names the failed check so the CLI can report it.
    """
