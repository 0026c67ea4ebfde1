import arviz as az

from camopy import experiments, models
from camopy.config import TrainConfig, load_config
from camopy.version import __version__

from .data import load_manifest, load_taxonomy, synth_generate

az.style.use("arviz-darkgrid")

__all__ = [
    "experiments",
    "models",
    "TrainConfig",
    "load_config",
    "load_manifest",
    "load_taxonomy",
    "synth_generate",
    "__version__",
]
