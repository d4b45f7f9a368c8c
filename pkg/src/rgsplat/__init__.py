"""Relightable Gaussian splatting: SH radiance transfer, SG specular and a differentiable CPU splatter."""

from .scene import GaussianCloud, load_scene, save_scene
from .splatter import Camera, render

__version__ = "0.1.0"

__all__ = ["Camera", "GaussianCloud", "load_scene", "render", "save_scene", "__version__"]
