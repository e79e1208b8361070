"""Exception hierarchy shared across the package."""


class DelivrError(Exception):
    """Base class for all package errors."""


class ConfigError(DelivrError, ValueError):
    """Invalid hyperparameter or configuration value."""


class ValidationError(DelivrError, ValueError):
    """Input data violates a structural invariant (e.g. a corrupted rotation)."""


class ShapeError(DelivrError, ValueError):
    """Operands have incompatible shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class GraphError(DelivrError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, repeated backward, ...)."""


class FormatError(DelivrError):
    """A binary artifact could not be decoded."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File declares an unsupported format version."""
