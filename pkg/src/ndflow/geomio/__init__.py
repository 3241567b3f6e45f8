"""Mesh ingestion, synthetic shapes, signed distances and isosurfaces."""
from .distance import MeshQuery, mesh_query, self_intersecting_faces, signed_distance, tri_tri_intersect
from .marching import grid_coords, grid_points, grid_to_mesh
from .mesh import (Similarity, TriMesh, load_mesh, make_mesh, normalize_mesh, save_mesh, save_obj,
                   save_ply)
from .sampling import SdfSamples, load_samples, sample_sdf, sample_surface, save_samples
from .synthetic import FAMILIES, icosphere, make_synthetic, random_params

__all__ = [
    "FAMILIES", "MeshQuery", "SdfSamples", "Similarity", "TriMesh", "grid_coords", "grid_points",
    "grid_to_mesh", "icosphere", "load_mesh", "load_samples", "make_mesh", "make_synthetic",
    "mesh_query", "normalize_mesh", "random_params", "sample_sdf", "sample_surface", "save_mesh",
    "save_obj", "save_ply", "save_samples", "self_intersecting_faces", "signed_distance",
    "tri_tri_intersect",
]
