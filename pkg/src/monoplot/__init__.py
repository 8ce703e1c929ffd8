"""Semi-automatic monoplotting: georeference single oblique photographs
against a digital elevation model.

The pipeline: detect corner GCP candidates in the photo and the DEM raster,
recover the 7-parameter camera by regularized gradient descent over a
nearest-neighbor point-set loss that tolerates unequal GCP counts, then
trace a ray per pixel into the terrain (or invert a depth buffer) to assign
world coordinates to every pixel.
"""

from .camera import (
    CameraParams,
    Intrinsics,
    PixelPoint,
    ProjectedSet,
    intrinsics_from_fov,
    project,
    project_set,
    rotation_from_euler,
)
from .dem import (
    DemError,
    DemRaster,
    GeoTransform,
    WorldPoint,
    dem_to_grayscale,
    pixel_to_world,
    read_asc,
    sample_elevation,
    world_to_pixel,
    write_asc,
)
from .georef import (
    CoordinateMaps,
    DepthBuffer,
    Ray,
    georeference_image,
    hillshade,
    intersect_dem,
    pixel_ray,
    read_maps,
    render_depth_buffer,
    render_overlay,
    write_maps,
)
from .keypoints import DemGcp, DetectorConfig, Keypoint, detect_dem_gcps, detect_keypoints
from .registration import (
    DegenerateProjectionError,
    OptimizerSchedule,
    RegistrationProblem,
    RegistrationResult,
    adapt_lambda,
    centroid_regularizer,
    chamfer_loss,
    gradient,
    objective,
    solve,
)

__version__ = "0.1.0"

__all__ = [
    "CameraParams", "Intrinsics", "PixelPoint", "ProjectedSet",
    "intrinsics_from_fov", "project", "project_set", "rotation_from_euler",
    "DemError", "DemRaster", "GeoTransform", "WorldPoint", "dem_to_grayscale",
    "pixel_to_world", "read_asc", "sample_elevation", "world_to_pixel", "write_asc",
    "CoordinateMaps", "DepthBuffer", "Ray", "georeference_image", "hillshade",
    "intersect_dem", "pixel_ray", "read_maps", "render_depth_buffer",
    "render_overlay", "write_maps",
    "DemGcp", "DetectorConfig", "Keypoint", "detect_dem_gcps", "detect_keypoints",
    "DegenerateProjectionError", "OptimizerSchedule", "RegistrationProblem",
    "RegistrationResult", "adapt_lambda", "centroid_regularizer", "chamfer_loss",
    "gradient", "objective", "solve",
]
