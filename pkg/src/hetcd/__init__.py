"""Targeted change detection between heterogeneous co-registered rasters.

Pipeline: translate each image into the other's domain with code-aligned
autoencoders, stack originals and difference images per pixel, then train
a two-step one-class classifier from a small set of labelled positives.
"""

from .cae import CaeConfig, TranslationResult, cae_change_map, train_cae, translate
from .occ import FeatureVariant, fit_occ, stack_features
from .raster import DatasetBundle, LabeledSet, Raster, load_bundle, normalize_raster, sample_positive_set, write_bundle
from .synth import SynthConfig, generate_synthetic_pair

__version__ = "0.1.0"

__all__ = [
    "CaeConfig",
    "DatasetBundle",
    "FeatureVariant",
    "LabeledSet",
    "Raster",
    "SynthConfig",
    "TranslationResult",
    "cae_change_map",
    "fit_occ",
    "generate_synthetic_pair",
    "load_bundle",
    "normalize_raster",
    "sample_positive_set",
    "stack_features",
    "train_cae",
    "translate",
    "write_bundle",
]
