"""Learned cortical surface deformation with local multi-scale intensity cubes."""

from pialnn.geometry import TriMesh, build_adjacency, compute_vertex_normals, laplacian_smooth
from pialnn.volume import Volume, VolumePyramid, build_pyramid, cube_sample
from pialnn.model import DeformationModel, ModelConfig, model_forward, mse_loss
from pialnn.training import TrainConfig, predict, train
from pialnn.metrics import average_abs_distance, chamfer, hausdorff, nearest_distances

__version__ = "0.1.0"

__all__ = [
    "TriMesh",
    "build_adjacency",
    "compute_vertex_normals",
    "laplacian_smooth",
    "Volume",
    "VolumePyramid",
    "build_pyramid",
    "cube_sample",
    "DeformationModel",
    "ModelConfig",
    "model_forward",
    "mse_loss",
    "TrainConfig",
    "predict",
    "train",
    "average_abs_distance",
    "chamfer",
    "hausdorff",
    "nearest_distances",
]
