"""Exception hierarchy shared by every stage of the pipeline."""


class EchoOneError(Exception):
    """Base class for all package errors."""


class UnknownLabel(EchoOneError, KeyError):
    def __init__(self, label, source=None):
        self.label = int(label)
        self.source = source
        where = f" in {source}" if source else ""
        super().__init__(f"label {self.label} not covered by remap table{where}")

    def __str__(self):
        return self.args[0]


class DegenerateShape(EchoOneError, ValueError):
    pass


class EmptyCavity(EchoOneError, ValueError):
    pass


class LayoutError(EchoOneError, ValueError):
    pass


class InsufficientData(EchoOneError, ValueError):
    pass


class EmptyCluster(EchoOneError, RuntimeError):
    pass


class ZeroVector(EchoOneError, ValueError):
    pass


class ShapeError(EchoOneError, ValueError):
    pass


class ShapeMismatch(ShapeError):
    pass


class HashMismatch(EchoOneError, ValueError):
    pass


class DataError(EchoOneError, ValueError):
    pass


class NumericalError(EchoOneError, FloatingPointError):
    pass


class ConfigError(EchoOneError, ValueError):
    pass


class FormatError(EchoOneError, ValueError):
    """An archive does not carry the expected format tag."""
