"""Exception hierarchy shared by all oodkit modules.

The CLI maps these onto exit codes: anything user-fixable (bad files,
bad shapes, bad parameters) exits with 2, numeric/internal failures
with 1.
"""


class ToolkitError(Exception):
    """Base class for all oodkit errors."""


class ConfigurationError(ToolkitError):
    """Inconsistent layer/model/run configuration (e.g. shape mismatch)."""


class InputError(ToolkitError):
    """Invalid runtime input: wrong tensor shape, label out of range,
    non-finite values, bad parameter value."""


class ShapeError(ToolkitError):
    """Spatial dimensions incompatible with an operation (e.g. odd
    height passed to a 2x2 pool without padding)."""


class DataError(ToolkitError):
    """Dataset-level problem: empty class, starved class after
    leave-out, bad manifest row."""


class FormatError(ToolkitError):
    """Malformed file: bad IDX magic, truncated payload, unparseable
    manifest or CSV."""


class CheckpointVersionError(FormatError):
    """Checkpoint manifest declares an unsupported format version."""


class CheckpointShapeError(FormatError):
    """Checkpoint tensor shapes do not match the declared model config."""


class CheckpointTruncatedError(FormatError):
    """Checkpoint payload is shorter than the manifest requires."""


class CalibrationError(ToolkitError):
    """Threshold calibration impossible (too few scores, bad quantile)."""


class GraphStateError(ToolkitError):
    """Backward pass requested on a node with no recorded computation."""


class NumericsError(ToolkitError):
    """Non-finite loss or gradient encountered during training."""


class UndefinedMetricError(ToolkitError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
