"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters: ConfigError for bad configuration, DataError for unreadable or
inconsistent inputs, NumericalError for runtime numerical failures
(zero intensities, aborted EM runs, supercritical simulations).
"""


class CascadesError(Exception):
    """Base class for all package errors."""


class ConfigError(CascadesError):
    """Invalid or inconsistent configuration."""


class DataError(CascadesError):
    """Invalid input data (event files, graphs, degenerate samples)."""


class NumericalError(CascadesError):
    """Numerical failure during fitting or simulation."""
