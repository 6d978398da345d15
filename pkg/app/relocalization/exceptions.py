"""
Error hierarchy for the relocalization package.

Most errors also subclass the builtin they refine so callers that only
know about ValueError keep working.
"""


class PL2MapError(Exception):
    """Base class for all relocalizer errors"""


class DimensionError(PL2MapError, ValueError):
    """Tensor or array shapes do not agree"""


class ProjectionError(PL2MapError, ValueError):
    """A point projects to infinity (camera-frame |z| below 1e-9)"""


class DegenerateSegmentError(PL2MapError, ValueError):
    """A 2D line segment is too short to define a supporting line"""


class ScheduleRangeError(PL2MapError, ValueError):
    """Training progress or iteration outside the schedule domain"""


class AugmentationRangeError(PL2MapError, ValueError):
    """Camera augmentation parameter outside the supported range"""


class GradCheckError(PL2MapError, ArithmeticError):
    """Objective evaluated to a non-finite value during a gradient check"""


class DatasetLoadError(PL2MapError, ValueError):
    """Scene dataset missing, malformed or violating an invariant"""


class CheckpointError(PL2MapError, ValueError):
    """Checkpoint file cannot be read"""


class ChecksumError(CheckpointError):
    """Checkpoint content does not match its stored checksum"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version"""
