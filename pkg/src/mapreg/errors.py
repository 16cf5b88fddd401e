"""Exception hierarchy shared by every stage of the pipeline."""


class MapRegError(Exception):
    """Base class for all library errors."""


class ValidationError(MapRegError, ValueError):
    """Bad input or configuration; the CLI maps these to exit code 2."""


class DegenerateCloud(MapRegError):
    """A point cloud has no spatial extent, so no similarity can be estimated."""


class LengthMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class UnsatisfiableVisibility(MapRegError):
    """Resampling could not give every local map at least three detections."""


class InvalidIntrinsics(ValidationError):
    pass


class InvalidDepth(ValidationError):
    pass


class UnknownClass(ValidationError):
    pass


class TooFewDetections(ValidationError):
    pass


class DisconnectedGraph(MapRegError):
    """The detection graph splits into several components and cannot be aligned."""


class ClassOutOfRange(ValidationError):
    pass


class EmptyGroup(ValidationError):
    pass


class DivergedLoss(MapRegError):
    pass


class NoValidMatches(MapRegError):
    pass
