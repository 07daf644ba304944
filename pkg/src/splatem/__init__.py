"""Heterogeneous cryo-EM reconstruction with deformable 3D Gaussians."""

from .core import Deformation, GaussianModel, Pose, render, render_volume
from .optics import CtfParams

__version__ = "0.1.0"

__all__ = ["CtfParams", "Deformation", "GaussianModel", "Pose", "render", "render_volume"]
