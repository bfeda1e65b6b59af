"""Exception types raised across the package."""


class OWGRError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(OWGRError, ValueError):
    pass


class MissingHead(OWGRError, KeyError):
    pass


class LabelError(OWGRError, ValueError):
    pass


class CacheError(OWGRError, RuntimeError):
    pass


class NumericsError(OWGRError, FloatingPointError):
    pass


class TooShort(OWGRError, ValueError):
    pass


class DatasetIOError(OWGRError, OSError):
    pass


class CatalogError(OWGRError, ValueError):
    pass


class ParamError(OWGRError, ValueError):
    pass


class EmptyTask(OWGRError, ValueError):
    pass


class CapacityExhausted(OWGRError, RuntimeError):
    pass


class ProtocolError(OWGRError, RuntimeError):
    pass


class UndefinedMetric(OWGRError, ValueError):
    pass
