"""cranioforge: volumetric scans and label masks in, layered watertight
3D surface scenes out."""

__version__ = "0.1.0"

from .volume import (  # noqa: E402
    Interpolation,
    NiftiError,
    NiftiFormatError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    VoxelVolume,
    parse_nifti,
    resample,
    voxel_to_world,
    world_to_voxel,
    write_nifti,
)
from .registration import (  # noqa: E402
    NoOverlapError,
    RegistrationConfig,
    RegistrationResult,
    RigidTransform,
    UndefinedVarianceError,
    compose,
    invert,
    register_rigid,
    similarity,
)
from .segmentation import (  # noqa: E402
    GridMismatchError,
    GrowthStage,
    LabelMask,
    RejectedSeedError,
    SeedOutOfBoundsError,
    SeedSet,
    connected_components,
    dilate,
    erode,
    largest_component,
    mask_volume,
    region_grow,
)
from .meshing import (  # noqa: E402
    MeshingConfig,
    SurfaceMesh,
    compute_vertex_normals,
    decimate,
    enclosed_volume,
    extract_isosurface,
    laplacian_smooth,
    make_two_sided,
    surface_area,
    watertight_report,
)
from .scene import (  # noqa: E402
    LayerEntry,
    SceneManifest,
    build_manifest,
    export_mesh,
    mesh_file_counts,
    validate_manifest,
    write_scene,
)
from .pipeline import (  # noqa: E402
    ConfigError,
    PipelineConfig,
    SceneValidationError,
    load_config,
    run_pipeline,
)
