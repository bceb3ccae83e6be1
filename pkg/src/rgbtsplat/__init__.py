"""Differentiable RGB + thermal Gaussian splatting on the CPU.

The engine renders a cloud of 3D Gaussians into per-pixel attribute maps,
feeds those maps through a small pixel-wise modulation network, and
composes explicit spherical-harmonic color with the network's implicit
color. Every gradient is derived by hand and checked against finite
differences; see the gradcheck module and the test suite.
"""

from .config import LossWeights, TrainConfig
from .cloud import Camera, GaussianCloud

__all__ = ["Camera", "GaussianCloud", "LossWeights", "TrainConfig"]
__version__ = "0.1.0"
