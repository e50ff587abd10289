"""drrgen: digitally reconstructed radiographs from CT volumes.

Renders X-ray-like projection images by exact ray-lattice traversal of a
voxel grid, with a batch pipeline that joins outputs to pathology labels.
"""

__version__ = "0.1.0"

from .errors import (
    DrrError,
    GeometryError,
    PipelineError,
    RenderError,
    UnsupportedFormatError,
    VolumeDataError,
    VolumeFormatError,
)
from .geometry import (
    ProjectionGeometry,
    Ray,
    RigidTransform,
    VIEW_PRESETS,
    apply_transform,
    default_frontal_geometry,
)
from .nifti import load_nifti
from .render import EnergyImage, NormalizationSpec, normalize, render_drr
from .siddon import AttenuationModel, TraversalResult, VoxelSegment, entry_exit, plane_crossings, traverse
from .volume import CtVolume, HounsfieldScaling, load_raw, write_raw

__all__ = [
    "AttenuationModel",
    "CtVolume",
    "DrrError",
    "EnergyImage",
    "GeometryError",
    "HounsfieldScaling",
    "NormalizationSpec",
    "PipelineError",
    "ProjectionGeometry",
    "Ray",
    "RenderError",
    "RigidTransform",
    "TraversalResult",
    "UnsupportedFormatError",
    "VIEW_PRESETS",
    "VolumeDataError",
    "VolumeFormatError",
    "VoxelSegment",
    "apply_transform",
    "default_frontal_geometry",
    "entry_exit",
    "load_nifti",
    "load_raw",
    "normalize",
    "plane_crossings",
    "render_drr",
    "traverse",
    "write_raw",
]
