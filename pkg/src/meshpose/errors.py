"""Exception and warning types raised across the package."""


class MeshPoseError(ValueError):
    """Base class for all input/contract violations."""


class InvalidSizeError(MeshPoseError):
    pass


class InsufficientResolutionError(MeshPoseError):
    pass


class InvalidDeformationError(MeshPoseError):
    pass


class EmptyInputError(MeshPoseError):
    pass


class BehindCameraError(MeshPoseError):
    pass


class NormalizationError(MeshPoseError):
    pass


class InvalidConcentrationError(MeshPoseError):
    pass


class UndefinedLossError(MeshPoseError):
    pass


class InconsistentAnnotationError(MeshPoseError):
    pass


class ShapeError(MeshPoseError):
    pass


class MissingPrototypeError(MeshPoseError, KeyError):
    pass


class DegenerateConfigurationError(MeshPoseError):
    pass


class InsufficientPointsError(MeshPoseError):
    pass


class InsufficientSupportError(MeshPoseError):
    pass


class InvalidRotationError(MeshPoseError):
    pass


class InvalidScaleError(MeshPoseError):
    pass


class PlacementError(MeshPoseError):
    pass


class ConfigError(MeshPoseError):
    pass


class EmptyVisibilityWarning(UserWarning):
    """Rasterization produced no visible vertex."""


class DegenerateBoxWarning(UserWarning):
    """A zero-volume box was passed to an IoU computation."""


class ConvergenceWarning(UserWarning):
    """An iterative optimizer hit its iteration cap."""
