"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: data errors exit 2, numerical failures 3.
"""


class MvregError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(MvregError, ValueError):
    pass


class BranchAmbiguityError(MvregError, ArithmeticError):
    """Rotation angle too close to pi for a unique logarithm."""


class DegenerateImageError(MvregError, ValueError):
    """Image has zero intensity variance."""


class DataError(MvregError):
    """Malformed or inconsistent input file."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class SidecarError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class SpacingError(DataError):
    pass


class LandmarkError(DataError):
    pass


class ProjectionError(MvregError, ArithmeticError):
    """Point lies at or behind the camera plane."""


class NonFiniteObjectiveError(MvregError, ArithmeticError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component
