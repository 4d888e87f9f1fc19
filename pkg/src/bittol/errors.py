"""Exception hierarchy shared across the package."""


class BittolError(Exception):
    """Base class for all structured errors raised by bittol."""


class ShapeError(BittolError):
    """Operand shapes or bit counts do not line up."""


class ArchError(BittolError):
    """Malformed or unsupported architecture description."""


class DataFormatError(BittolError):
    """A dataset or model file failed structural validation."""


class DivergenceError(BittolError):
    """Training produced a non-finite loss."""
