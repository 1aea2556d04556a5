"""File formats, dataset loading and synthetic scenes."""

from . import formats
from .dataset import Dataset, DatasetErrors, IngestConfig, load_dataset, read_manifest, write_manifest
from .synthetic import GroundTruth, SyntheticScene, SyntheticSceneConfig, generate_synthetic_scene, write_scene

__all__ = [
    "Dataset", "DatasetErrors", "GroundTruth", "IngestConfig", "SyntheticScene", "SyntheticSceneConfig",
    "formats", "generate_synthetic_scene", "load_dataset", "read_manifest", "write_manifest", "write_scene",
]
