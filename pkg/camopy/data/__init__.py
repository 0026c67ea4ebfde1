"""Code for loading and generating camouflage datasets."""
from .datasets import load_taxonomy, preset_path
from .manifest import (
    CamouflageSample,
    DatasetManifest,
    ManifestEntry,
    attribute_statistics,
    category_statistics,
    description_statistics,
    load_manifest,
    load_sample,
    write_manifest,
)
from .simulate_data import SynthConfig, synth_generate
from .taxonomy import AttributeTaxonomy, category_contributions

__all__ = [
    "AttributeTaxonomy",
    "CamouflageSample",
    "DatasetManifest",
    "ManifestEntry",
    "SynthConfig",
    "attribute_statistics",
    "category_contributions",
    "category_statistics",
    "description_statistics",
    "load_manifest",
    "load_sample",
    "load_taxonomy",
    "preset_path",
    "synth_generate",
    "write_manifest",
]
