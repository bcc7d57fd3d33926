"""Exception types raised across the package."""


class RegistrationError(Exception):
    """Base class for all package errors."""


class DegeneratePoint(RegistrationError):
    """A point maps to the line at infinity under a homography."""


class DegenerateConfiguration(RegistrationError):
    """Correspondences do not determine a unique homography."""


class InsufficientPoints(RegistrationError):
    pass


class NoConsensus(RegistrationError):
    """RANSAC could not find a model with enough inliers."""


class NonPositiveScale(RegistrationError, ValueError):
    pass


class DimensionMismatch(RegistrationError, ValueError):
    pass


class OutOfBounds(RegistrationError, IndexError):
    pass


class DegenerateBatch(RegistrationError, ValueError):
    """A multiview batch without any negative sample."""


class NonPositiveTemperature(RegistrationError, ValueError):
    pass


class ShapeMismatch(RegistrationError, ValueError):
    pass


class TooFewSurvivors(RegistrationError):
    """Fewer than two keypoints remain inside every augmented view."""


class NonFiniteLoss(RegistrationError, FloatingPointError):
    pass


class SpecInfeasible(RegistrationError):
    pass


class EmptyInput(RegistrationError, ValueError):
    pass


class FormatError(RegistrationError, ValueError):
    """A file does not follow its documented on-disk layout."""
