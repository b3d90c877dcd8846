"""Exception hierarchy shared across the package."""


class OiladError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    exit_code = 1


class ConfigError(OiladError, ValueError):
    exit_code = 2


class VersionError(OiladError):
    exit_code = 3


class ParseError(OiladError, ValueError):
    exit_code = 4


class ShapeError(OiladError, ValueError):
    pass


class NumericalError(OiladError, FloatingPointError):
    pass


class InjectionError(OiladError):
    """No anomaly of the requested shape exists for this trajectory."""


class DegenerateDataError(OiladError, ValueError):
    pass
