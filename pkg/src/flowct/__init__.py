"""Volumetric CT synthesis with rectified flow in a learned latent space.

Framework-free: models, training, and evaluation run on numpy plus an
optional compiled convolution core (see `flowct.kernels.BACKEND`).
"""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
