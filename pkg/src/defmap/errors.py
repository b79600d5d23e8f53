"""Error taxonomy shared across the package.

Every failure mode that callers are expected to handle gets its own class so
the CLI can map error classes to distinct exit codes.
"""


class DefmapError(Exception):
    """Base class for all package-specific errors."""


class DimMismatch(DefmapError):
    """An array argument has an incompatible shape."""


class DegenerateInput(DefmapError):
    """An input is numerically degenerate (zero norm, collinear 6D pair, ...)."""


class BehindCamera(DefmapError):
    """A perspective projection was requested for a point with z <= 0."""


class WrongCameraKind(DefmapError):
    """An operation got a camera of the wrong projection kind."""


class SingularSystem(DefmapError):
    """A linear system required by a closed-form solve is (near-)singular."""


class EmptyVisibleSet(DefmapError):
    """A loss that averages over visible keypoints got an empty visible set."""


class KTooLarge(DefmapError):
    """min-k aggregation was asked for more references than available."""


class DegenerateCloud(DefmapError):
    """A point cloud has (near-)zero variance and cannot be normalized."""


class DegenerateDepth(DefmapError):
    """A predicted depth map has (near-)zero variance over the mask."""


class GimbalDegenerate(DefmapError):
    """Twist-swing decomposition hit the 180-degree swing singularity."""


class DegenerateRotations(DefmapError):
    """Upward-axis extraction got rotations that are all (near-)identity."""


class InvalidSpec(DefmapError):
    """A category/config specification fails validation."""


class InfeasibleConstraint(DefmapError):
    """A batch-construction constraint cannot be satisfied."""


class NonFiniteGradient(DefmapError):
    """A training step produced a non-finite gradient."""


class CheckpointError(DefmapError):
    """A checkpoint file is malformed or inconsistent with its header."""


class IoError(DefmapError):
    """A required path is missing or an artifact on disk is malformed."""
