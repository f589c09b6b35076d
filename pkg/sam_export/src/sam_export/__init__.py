"""sam_export: promptable-segmentation frames in the fusion engine's formats.

Runs a promptable segmenter over a directory of multi-view images and
writes per-view mask and feature frames that the maskfield engine consumes
as files.  The two packages share nothing but the byte formats.
"""

from .errors import ExportError, InputMismatch, ModelLoad, PromptOutOfBounds
from .export import ExportJob, export_features, export_masks, load_prompts
from .model import resolve_model

__version__ = "0.1.0"

__all__ = [
    "ExportError",
    "ExportJob",
    "InputMismatch",
    "ModelLoad",
    "PromptOutOfBounds",
    "export_features",
    "export_masks",
    "load_prompts",
    "resolve_model",
]
