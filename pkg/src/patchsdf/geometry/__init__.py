from .analytic import AnalyticShape, analytic_normal, analytic_sdf
from .distance import (MeshIndex, closest_point_on_triangles, point_mesh_distance,
                       signed_distance, winding_number)
from .mesh import (TriMesh, box_mesh, empty_mesh, icosphere, load_mesh, normalize_unit_sphere,
                   save_mesh, save_obj, save_ply, sphere_chord_height, torus_mesh)
from .render import CameraView, ray_mesh_first_hit, render_partial
from .sampling import (DEFAULT_TRUNCATION, SURFACE_SET_SIZE, SdfSampleSet, SurfaceSamples,
                       add_sdf_noise, load_surface_samples, read_sdf_samples, sample_sdf_set,
                       sample_surface, save_surface_samples, write_sdf_samples)

__all__ = [
    "AnalyticShape", "CameraView", "MeshIndex", "SdfSampleSet", "SurfaceSamples", "TriMesh",
    "DEFAULT_TRUNCATION", "SURFACE_SET_SIZE",
    "add_sdf_noise", "analytic_normal", "analytic_sdf", "box_mesh", "closest_point_on_triangles",
    "empty_mesh", "icosphere", "load_mesh", "load_surface_samples", "normalize_unit_sphere",
    "point_mesh_distance", "ray_mesh_first_hit", "read_sdf_samples", "render_partial",
    "sample_sdf_set", "sample_surface", "save_mesh", "save_obj", "save_ply",
    "save_surface_samples", "signed_distance", "sphere_chord_height", "torus_mesh",
    "winding_number", "write_sdf_samples",
]
