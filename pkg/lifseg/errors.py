# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""Exception types raised across the lifseg package."""


class LifSegError(Exception):
    """Base class for every error raised by lifseg."""


class InvalidBundle(LifSegError, ValueError):
    """A FrameBundle violates one of its type invariants."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class NonRigid(LifSegError, ValueError):
    """A 4x4 matrix is not a proper rigid transform within tolerance."""


class BadWindow(LifSegError, ValueError):
    """Context window size is even or smaller than one."""


class ShapeMismatch(LifSegError, ValueError):
    """Operands of an array operation have incompatible shapes."""

    def __init__(self, op: str, left, right):
        super().__init__(f"{op}: incompatible shapes {tuple(left)} and {tuple(right)}")
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)


class NotScalarLoss(LifSegError, ValueError):
    """backward() was called on a node that is not a scalar."""


class LabelOutOfRange(LifSegError, ValueError):
    """A class label lies outside [0, C)."""


class EmptyMatrix(LifSegError, ValueError):
    """mIoU requested on a confusion matrix with zero total count."""


class DegenerateScene(LifSegError, RuntimeError):
    """No LiDAR ray hit anything in a synthetic scene."""


class TooFewFrames(LifSegError, ValueError):
    """A dataset split needs at least two frames."""


class CorruptFile(LifSegError):
    """An on-disk artifact is truncated, oversized or malformed."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class VersionMismatch(LifSegError):
    """Dataset meta.json was written by an incompatible format version."""


# Errors that mean "the input data is bad", as opposed to a runtime failure.
DATA_ERRORS = (InvalidBundle, CorruptFile, VersionMismatch, TooFewFrames, DegenerateScene, FileNotFoundError)
