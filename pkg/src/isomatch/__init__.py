"""Unsupervised dense correspondence between deformable triangle meshes.

A descriptor network is trained, without labels, by minimizing pairwise
geodesic distance distortion through a differentiable functional-map
pipeline. Axiomatic stages surround the learned part: spectral bases and
geodesic distance matrices on the way in, product-manifold-filter refinement
and robust spectral upscaling on the way out.
"""

from .errors import IsomatchError, MeshError, DataError, NumericsError
from .mesh import TriMesh, load_mesh, save_mesh, save_mesh_with_colors, simplify
from .spectral import SpectralBasis, compute_basis
from .geodesic import GeodesicMatrix, distance_matrix
from .shot import DescriptorField, shot_descriptors
from .fmaps import pipeline_forward, solve_fm, soft_corr, sup_loss, unsup_loss
from .train import TrainConfig, train_loop
from .refine import PointMap, extract_map, pmf_refine, upscale
from .evaluation import ErrorCurve, curve, geodesic_errors
from .dataio import PreprocessParams, ShapeBundle, load_dataset, preprocess

__all__ = [
    "IsomatchError", "MeshError", "DataError", "NumericsError",
    "TriMesh", "load_mesh", "save_mesh", "save_mesh_with_colors", "simplify",
    "SpectralBasis", "compute_basis",
    "GeodesicMatrix", "distance_matrix",
    "DescriptorField", "shot_descriptors",
    "pipeline_forward", "solve_fm", "soft_corr", "sup_loss", "unsup_loss",
    "TrainConfig", "train_loop",
    "PointMap", "extract_map", "pmf_refine", "upscale",
    "ErrorCurve", "curve", "geodesic_errors",
    "PreprocessParams", "ShapeBundle", "load_dataset", "preprocess",
]

__version__ = "0.1.0"
