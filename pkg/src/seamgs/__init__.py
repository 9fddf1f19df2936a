"""Gaussian splatting on ERP panoramas with dual-fisheye self-calibration.

Modules: ``geom`` (rotations, ERP mapping), ``scene`` (splat containers and
files), ``calib`` (camera gaps and angular distortion grids), ``raster``
(differentiable ERP rasterizer), ``optim`` (joint optimisation), ``synth``
(simulated dual-fisheye captures), ``metrics`` and ``cli``.
"""
from .calib import CameraRig, DualFisheyeCalib, DistortionGrid
from .geom import Pose
from .optim import TrainConfig, train
from .raster import render_ideal, render_stitched
from .scene import GaussianScene, load_scene, save_scene

__version__ = "0.1.0"

__all__ = [
    "CameraRig", "DualFisheyeCalib", "DistortionGrid", "Pose", "TrainConfig", "train",
    "render_ideal", "render_stitched", "GaussianScene", "load_scene", "save_scene",
]
