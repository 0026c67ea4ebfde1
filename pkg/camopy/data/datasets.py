"""
Functions to locate and load the resources bundled with the package: the default
attribute taxonomy and the configuration presets.
"""
import pathlib
from typing import Optional, Union

from camopy.data.taxonomy import AttributeTaxonomy

PRESETS = {
    "default": {"filename": "default.yaml"},
    "toy": {"filename": "toy.yaml"},
    "toy96": {"filename": "toy96.yaml"},
}


def _get_data_home() -> pathlib.Path:
    """Return the path of the data directory"""
    return pathlib.Path(__file__).parent


def load_taxonomy(
    path: Optional[Union[str, pathlib.Path]] = None
) -> AttributeTaxonomy:
    """Loads an attribute taxonomy, the bundled default when no path is given.

    :param path: Optional key-value taxonomy file overriding the default
    """
    if path is None:
        path = _get_data_home() / "taxonomy.yaml"
    return AttributeTaxonomy.from_yaml(path)


def preset_path(preset: str) -> pathlib.Path:
    """Path of a bundled configuration preset.

    :param preset: One of the names in ``PRESETS``
    """
    if preset in PRESETS:
        return _get_data_home() / "configs" / PRESETS[preset]["filename"]
    else:
        raise ValueError(f"Preset {preset} not found!")
