"""Exception hierarchy.

Every failure mode raised by this package derives from :class:`LaneGenError`
so callers (including the CLI) can catch one type and report the error class
name in a machine-parsable way.
"""


class LaneGenError(Exception):
    """Base class for all lanegen errors."""


class DegeneratePolyline(LaneGenError):
    """Polyline has zero total length and cannot be resampled."""


class EmptyInput(LaneGenError):
    """An operation received an empty point set or instance list."""


class CyclicTileGraph(LaneGenError):
    """Residual cycle found in a tile-clipped road graph."""


class InvalidWidth(LaneGenError):
    """Lane width must be strictly positive."""


class UninterpolatableDivider(LaneGenError):
    """All points of a divider are flagged as gaps."""


class UnknownLayout(LaneGenError):
    """Scene generator does not know the requested layout name."""


class MalformedScene(LaneGenError):
    """Scene or map file violates the documented schema."""


class EmptyTile(LaneGenError):
    """A tile ended up without trajectories or without ground truth."""


class ZeroDirection(LaneGenError):
    """Direction vector of length zero has no hue."""


class BadResolution(LaneGenError):
    """Raster height/width incompatible with the backbone stride."""


class BadHeadDim(LaneGenError):
    """Embedding dimension is not divisible by the attention head count."""


class BadCost(LaneGenError):
    """Assignment cost matrix contains NaN or is not square."""


class NoInstances(LaneGenError):
    """Evaluation called with neither predictions nor ground truth."""


class TrainingDiverged(LaneGenError):
    """Loss became non-finite during training."""


class NotFitted(LaneGenError):
    """Estimator used before ``fit`` was called."""


class ConfigError(LaneGenError):
    """Unknown or malformed configuration key."""
