"""Exception hierarchy for the DRR engine."""


class DrrError(Exception):
    """Base class for all engine errors."""


class VolumeFormatError(DrrError):
    """A volume file is malformed (bad magic, truncated data, bad header field)."""


class UnsupportedFormatError(DrrError):
    """A volume file is valid but uses a feature outside the supported subset."""


class VolumeDataError(DrrError):
    """Voxel data violates an invariant (e.g. non-finite value after scaling)."""


class GeometryError(DrrError):
    """Imaging geometry is unusable (e.g. source inside the volume)."""


class RenderError(DrrError):
    """Internal rendering failure (e.g. non-finite energy at a pixel)."""


class PipelineError(DrrError):
    """Fatal batch-pipeline failure (unreadable manifest, missing label column)."""
