"""Polarimetric Gaussian-surfel splatting: differentiable rendering of Stokes
images from surfels plus a learnable environment cubemap, and the training,
evaluation and export pipeline around it."""

from .scene import Camera, Cubemap, GaussianSurfel, SurfelCloud, load_checkpoint, save_checkpoint
from .rasterizer import rasterize
from .render import render_stokes
from .stokes import compose_stokes, quad_from_stokes, stokes_from_quad
from .dataset import PolarizedView, load_dataset, make_scene, make_synthetic_dataset
from .trainer import TrainConfig, train
from .metrics import EvalReport, chamfer_distance, evaluate, export_decomposition, export_pointcloud, mae_normals

__version__ = "0.1.0"
