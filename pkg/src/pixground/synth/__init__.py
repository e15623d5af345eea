"""Synthetic referring-expression benchmark."""

from .language import Vocabulary, generate_expression, swap_relation, tokenize
from .oracle import resolve
from .scene import ATTRIBUTES, CATEGORIES, GenConfig, Scene, SceneObject, generate_scene, render
from .splits import (GroundingDataset, GroundingSample, SplitConfig, build_splits,
                     read_manifest, samples_from_manifest, write_manifest)

__all__ = [
    "ATTRIBUTES", "CATEGORIES", "GenConfig", "GroundingDataset", "GroundingSample", "Scene",
    "SceneObject", "SplitConfig", "Vocabulary", "build_splits", "generate_expression",
    "generate_scene", "read_manifest", "render", "resolve", "samples_from_manifest",
    "swap_relation", "tokenize", "write_manifest",
]
