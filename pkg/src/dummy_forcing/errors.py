"""Exception types raised by the public API."""


class DummyForcingError(Exception):
    """Base class for all library errors."""


class ShapeError(DummyForcingError, ValueError):
    """Operand dimensions are incompatible."""


class DegenerateRowError(DummyForcingError, ValueError):
    """A softmax row has no unmasked entry."""


class OrderingError(DummyForcingError, ValueError):
    """A frame was appended out of chronological order."""


class ConfigError(DummyForcingError, ValueError):
    """A configuration value or file is invalid."""


class PackingError(DummyForcingError, ValueError):
    """Heads batched into one attention call have mismatched context lengths."""


class AssignmentError(DummyForcingError, ValueError):
    """A head assignment is missing or inconsistent with cache state."""


class CapacityError(DummyForcingError, ValueError):
    """A problem instance exceeds an exhaustive solver's size guard."""
