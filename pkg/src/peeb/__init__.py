"""Part-based image classification with an editable natural-language
descriptor bottleneck: detected object parts are matched to per-part text
descriptors and a class logit is the sum of the per-part matching scores."""

from .boxes import BoundingBox
from .descriptors import (
    BIRD_PARTS,
    DOG_PARTS,
    DescriptorLibrary,
    PartVocabulary,
    clone_class,
    edit_descriptor,
    load_library,
    randomize_descriptors,
    save_library,
)
from .errors import PeebError
from .model import Explanation, ModelConfig, PeebModel, Pipeline, load_checkpoint, save_checkpoint

__all__ = [
    "BIRD_PARTS",
    "DOG_PARTS",
    "BoundingBox",
    "DescriptorLibrary",
    "Explanation",
    "ModelConfig",
    "PartVocabulary",
    "PeebError",
    "PeebModel",
    "Pipeline",
    "clone_class",
    "edit_descriptor",
    "load_checkpoint",
    "load_library",
    "randomize_descriptors",
    "save_checkpoint",
    "save_library",
]
