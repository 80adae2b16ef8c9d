"""Exception hierarchy shared by all sdslam modules."""


class SlamError(Exception):
    """Base class for all sdslam errors."""


# --- geometry ---

class NonPositiveDepth(SlamError):
    """Point at or behind the camera plane cannot be projected."""


class NonPositiveInverseDepth(SlamError):
    """Inverse depth must be strictly positive."""


class ZeroDisparity(SlamError):
    """Zero disparity corresponds to a point at infinity."""


# --- imaging ---

class ImageTooSmall(SlamError):
    pass


class TooManyLevels(SlamError):
    pass


class DimensionMismatch(SlamError):
    pass


# --- feature frontend ---

class InsufficientMatches(SlamError):
    """Fewer matches than the minimum needed for motion estimation."""


class DegenerateGeometry(SlamError):
    """RANSAC never reached the minimum inlier count."""


# --- direct alignment ---

class EmptyOverlap(SlamError):
    """No valid residual pixels; tracking is lost."""


class DivergedAlignment(SlamError):
    """Cost increased monotonically; the optimization ran away."""


# --- odometry engine ---

class NotInitialized(SlamError):
    pass


class NoMatches(SlamError):
    pass


class InsufficientDepth(SlamError):
    """Too few depth hypotheses to bootstrap a keyframe."""


# --- pose graph ---

class DisconnectedGraph(SlamError):
    pass


# --- dataset io ---

class MissingFile(SlamError):
    pass


class MalformedCalibration(SlamError):
    pass


class UnpairableFrames(SlamError):
    pass


class IoFailure(SlamError):
    pass


class MalformedLine(SlamError):
    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


# --- evaluation ---

class NoAssociations(SlamError):
    pass


class TooFewPairs(SlamError):
    pass


class TrajectoryTooShort(SlamError):
    pass


class ZeroBaseline(SlamError):
    pass


# --- synth ---

class IndexOutOfRange(SlamError):
    pass
