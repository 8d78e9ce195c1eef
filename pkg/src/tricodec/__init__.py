"""tricodec: triplane codec for colored point clouds with latent diffusion.

Colored point clouds are encoded into a compact triplane latent through a
feature-volume VAE with 3D-aware cross-attention, decoded back to textured
meshes via differentiable isosurface extraction and a software rasterizer,
and generated from image embeddings by a two-stage latent diffusion model
with dual classifier-free guidance.
"""

from .backend import active_backend, set_backend, NUMBA_AVAILABLE
from .errors import (
    ShapeError,
    GraphError,
    NumericalError,
    MissingArtifactError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "active_backend",
    "set_backend",
    "NUMBA_AVAILABLE",
    "ShapeError",
    "GraphError",
    "NumericalError",
    "MissingArtifactError",
    "UsageError",
    "__version__",
]
