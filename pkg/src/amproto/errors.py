"""Exception hierarchy shared by every module."""


class AMPError(Exception):
    """Base class for all package errors."""


class BadShape(AMPError, ValueError):
    pass


class RankDeficient(AMPError, ArithmeticError):
    pass


class BadStep(AMPError, ValueError):
    pass


class BadLabel(AMPError, ValueError):
    pass


class BadSpec(AMPError, ValueError):
    pass


class EmptyDataset(AMPError, ValueError):
    pass


class EmptyClass(AMPError, ValueError):
    pass


class ZeroMatrix(AMPError, ValueError):
    pass


class Degenerate(AMPError, ValueError):
    pass


class NonFinite(AMPError, ArithmeticError):
    pass


class CorruptCheckpoint(AMPError, ValueError):
    """Raised for malformed AMPC/AMPD files (bad magic, length, checksum)."""


class InvariantViolation(AMPError):
    pass


class StaleCache(AMPError):
    pass


class IOFailure(AMPError, OSError):
    pass
