"""histo3d: 3D organ and tumor models from sparse serial-section histology.

Elastic spring-mesh registration, volumetric surface reconstruction,
patch-level feature extraction, and scene-bundle export for the browser
viewer.
"""

__version__ = "0.1.0"

from .stack import StackMetadata, Section, SectionStack, load_stack, downscale_mask, z_spacing_px
from .springs import SpringMesh, build_triangular_mesh, relax
from .registration import RegistrationParams, ncc, block_match, register_stack, warp
from .meshing import (
    SurfaceMesh,
    GeometryReport,
    extract_point_cloud,
    reconstruct_surface,
    build_tumor_mesh,
    measure_geometry,
    normalize_model,
    align_tumor,
)
from .features import feature_vector, tile_patches, normalize_and_index, percentile_threshold
from .phantom import PhantomSpec, TumorSpec, generate_phantom
from .pipeline import PipelineConfig, run_pipeline
