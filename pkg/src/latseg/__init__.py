"""Latent-segmenter toolkit.

Fits a two-operator affine color decomposition to paired images, ranks
candidate latent directions by how cleanly they split into two operators,
synthesizes filtered binary masks, and trains a small segmentation network
on them.
"""

from ._kernels import available_backends, backend_name, set_backend

__version__ = "0.1.0"

__all__ = ["available_backends", "backend_name", "set_backend", "__version__"]
