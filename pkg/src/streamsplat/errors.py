"""Engine exception hierarchy.

Every operation that can fail raises one of these named errors; callers
match on the class, never on message text.
"""


class EngineError(Exception):
    """Base class for all engine failures."""


class SingularCovariance(EngineError):
    """Gaussian covariance is numerically non-invertible."""


class DimMismatch(EngineError):
    """Array shapes disagree with the declared layout."""


class EmptyLabel(EngineError):
    """A label string was empty."""


class BadK(EngineError):
    """A k-nearest-neighbour count was < 1."""


class NoGeometrySource(EngineError):
    """Frame carries neither a pointmap/inverse depth nor a pose prior."""


class DegenerateAlignment(EngineError):
    """Fewer than 3 usable correspondences for rigid alignment."""


class EmptyInit(EngineError):
    """Initialization produced an empty point cloud."""


class DivergedOptimization(EngineError):
    """Loss became non-finite; carries the last stable state."""

    def __init__(self, message, last_stable=None):
        super().__init__(message)
        self.last_stable = last_stable


class StaleForwardState(EngineError):
    """Backward pass invoked with inputs that no longer match the forward cache."""


class EmptyStore(EngineError):
    """Operation requires a non-empty Gaussian store."""


class EmptyTSDF(EngineError):
    """TSDF fusion saw no depth coverage at all."""


class ClassMismatch(EngineError):
    """Prediction and ground truth disagree on the class count."""


class MalformedStream(EngineError):
    """Scene stream on disk is invalid; message names the first bad file."""
