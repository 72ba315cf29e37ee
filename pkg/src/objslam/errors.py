"""Exception types raised across the package."""


class ObjSlamError(Exception):
    """Base class for all package errors."""


class NotAnEllipse(ObjSlamError):
    """Dual conic does not describe a real, non-degenerate ellipse."""


class OffImage(ObjSlamError):
    """Projected conic has no overlap with the image."""


class NotAnEllipsoid(ObjSlamError):
    """Dual quadric is not a real ellipsoid."""


class DegenerateBaseline(ObjSlamError):
    """Two camera centres coincide, so no epipolar geometry exists."""


class InsufficientData(ObjSlamError):
    pass


class EmptyInput(ObjSlamError):
    pass


class ZeroVector(ObjSlamError):
    pass


class TooFewObservations(ObjSlamError):
    pass


class Infeasible(ObjSlamError):
    pass


class MaxIterations(ObjSlamError):
    pass


class DegenerateScale(ObjSlamError):
    pass


class NoFactors(ObjSlamError):
    pass


class EmptyScene(ObjSlamError):
    pass


class EmptyOverlap(ObjSlamError):
    pass


class NoInitializedObjects(ObjSlamError):
    pass


class OutOfOrderFrame(ObjSlamError):
    pass


class SchemaError(ObjSlamError):
    """File on disk does not match the expected schema or version."""
