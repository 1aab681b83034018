"""Exception types shared across the package."""


class RegionSegError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(RegionSegError):
    """Invalid parameter or configuration value."""


class TileLoadError(RegionSegError):
    """Tile directory is missing, malformed, or inconsistent."""


class ShapeError(RegionSegError):
    """Tensor shape incompatible with the operation."""


class RoutingError(RegionSegError):
    """Invalid region index or non-finite gating logits."""


class StatsError(RegionSegError):
    """Routing statistics are empty or not a valid joint distribution."""


class LossError(RegionSegError):
    """Loss input is invalid or non-finite."""


class LabelError(LossError):
    """Class or region label out of range."""


class CheckpointError(RegionSegError):
    """Checkpoint file is corrupt, wrong version, or config-incompatible."""


class MissingArtifactError(RegionSegError):
    """A required upstream artifact (checkpoint, data directory) does not exist."""


class UntrainedClassifierError(RegionSegError):
    """Region classifier used before training."""


class StabilityUndefinedError(RegionSegError):
    """Stability score requested with a single source region."""


class SelectionError(RegionSegError):
    """Pseudo-label selection received an empty sample set."""


class MetricError(RegionSegError):
    """Invalid input to metric computation."""


class AnalysisError(RegionSegError):
    """Region-similarity analysis preconditions violated."""


class NumericalError(RegionSegError):
    """Non-finite loss or other runtime numerical failure."""
