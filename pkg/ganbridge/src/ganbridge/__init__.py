"""Bridge from generator/encoder models to the segmentation toolkit's file formats."""

from .export import ExportSpec, encode_images, export_pairs, load_directions
from .model import LATENT_DIM, load_model

__all__ = [
    "ExportSpec",
    "LATENT_DIM",
    "encode_images",
    "export_pairs",
    "load_directions",
    "load_model",
]

__version__ = "0.1.0"
