"""Convert torchvision checkpoints and image batches into SPNR containers."""
from .export import (IMAGENET_MEAN, IMAGENET_STD, ExportManifest, export_batches,
                     export_labels, export_model)
from .format import write_container
from .graphs import ARCHS, ExportError

__all__ = [
    "ARCHS", "ExportError", "ExportManifest", "IMAGENET_MEAN", "IMAGENET_STD",
    "export_batches", "export_labels", "export_model", "write_container",
]
