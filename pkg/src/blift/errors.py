"""Exception hierarchy. Every error raised on bad input derives from BliftError."""


class BliftError(Exception):
    pass


class GraphValidationError(BliftError, ValueError):
    pass


class AssignmentError(BliftError, ValueError):
    pass


class ExposureError(BliftError, ValueError):
    pass


class EstimationError(BliftError, RuntimeError):
    pass


class ProjectionError(BliftError, ValueError):
    pass


class BootstrapError(BliftError, RuntimeError):
    pass


class ConfigError(BliftError, ValueError):
    pass


class ReportError(BliftError, ValueError):
    pass
