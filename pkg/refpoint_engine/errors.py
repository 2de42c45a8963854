"""
Exception hierarchy for the referencing pipeline.

Three families map onto CLI exit codes:
- DataError       -> 2 (bad inputs, files, splits)
- NumericalError  -> 3 (degenerate vectors, non-finite losses)
- UsageError      -> 1 (bad arguments / overrides)
"""


class RefpointError(Exception):
    """Root of every error raised by refpoint_engine."""
    exit_code = 1


class UsageError(RefpointError, ValueError):
    exit_code = 1


class DataError(RefpointError):
    exit_code = 2


class NumericalError(RefpointError):
    exit_code = 3


# --- geometry ---
class DegenerateFootprintError(DataError, ValueError):
    """Tyre contact points do not span a usable footprint."""


class OriginTargetError(DataError, ValueError):
    """Ground-truth target sits (almost) on the car origin."""


# --- sensor streams ---
class EmptyModalityError(DataError, ValueError):
    """A modality has no valid frame to interpolate from."""


class InsufficientCoverageError(DataError, ValueError):
    """The requested window runs past the stream bounds."""


# --- scenario / corpus ---
class UnknownTargetError(DataError, KeyError):
    pass


class UnknownPoseError(DataError, KeyError):
    pass


class CorpusError(DataError):
    pass


class FormatError(DataError):
    pass


class IoError(DataError, OSError):
    pass


# --- network / training ---
class ShapeMismatchError(DataError, ValueError):
    pass


class EmptySplitError(DataError, ValueError):
    pass


class DataLeakageError(DataError):
    """A test-fold user reached the training batch stream."""


# --- evaluation ---
class EmptyInputError(DataError, ValueError):
    pass


class TooFewUsersError(DataError, ValueError):
    pass


class EmptyFilterError(DataError, ValueError):
    pass


# --- numerics ---
class ZeroVectorError(NumericalError, ValueError):
    pass


class ZeroPredictionError(ZeroVectorError):
    """A predicted direction collapsed to the zero vector."""
