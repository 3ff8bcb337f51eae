"""Procedural granule scenes with exact per-pixel and physical ground truth."""

from .dataset import DatasetManifest, GranuleDataset, export_dataset, generate_dataset, tree_digest
from .materials import COPPER, DEFAULT_PALETTE, MaterialSpec
from .population import (Granule, SamplePopulation, direct_mass_purity, sample_population,
                         true_mass_purity)
from .render import StirredScene, stir_and_render, true_area_purity

__all__ = [
    "COPPER", "DEFAULT_PALETTE", "DatasetManifest", "Granule", "GranuleDataset", "MaterialSpec",
    "SamplePopulation", "StirredScene", "direct_mass_purity", "export_dataset", "generate_dataset",
    "sample_population", "stir_and_render", "tree_digest", "true_area_purity", "true_mass_purity",
]
