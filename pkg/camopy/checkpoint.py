"""
Checkpoint files: model and optimizer state, counters, the training config and
its hash, and a metric snapshot. Writes are atomic.
"""
import logging
import os
import pathlib
import tempfile
from typing import Any, Dict, Optional, Union

import torch

from camopy.config import TrainConfig
from camopy.custom_exceptions import CheckpointException, ConfigException
from camopy.encoders import PrecomputedFeatures
from camopy.models import CamouflageSegmenter, strip_text_branch

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("model_state", "epoch", "step", "config", "config_hash")
PathLike = Union[str, pathlib.Path]


def checkpoint_payload(
    model: CamouflageSegmenter,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: int = 0,
    step: int = 0,
    metrics: Optional[Dict[str, float]] = None,
) -> Dict[str, Any]:
    """The dictionary stored in a checkpoint file"""
    return {
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "step": int(step),
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "metrics": dict(metrics or {}),
    }


def write_payload(payload: Dict[str, Any], path: PathLike) -> pathlib.Path:
    """Save ``payload`` to a temporary file in the target directory, then rename
    it over ``path``; readers never see a partial file."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as err:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise CheckpointException(f"Could not write checkpoint {path}: {err}") from err
    logger.debug("Wrote checkpoint %s", path)
    return path


def save_checkpoint(
    path: PathLike,
    model: CamouflageSegmenter,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: int = 0,
    step: int = 0,
    metrics: Optional[Dict[str, float]] = None,
) -> pathlib.Path:
    """Atomically write a checkpoint.

    :param path:
        Destination file
    :param model:
        The model whose parameters and config are stored
    :param optimizer:
        Optional optimizer whose state is stored
    :param epoch:
        Completed epochs
    :param step:
        Completed optimizer steps
    :param metrics:
        Metric snapshot, e.g. the last epoch's mean losses
    """
    return write_payload(checkpoint_payload(model, optimizer, epoch, step, metrics), path)


def load_checkpoint(path: PathLike, map_location: str = "cpu") -> Dict[str, Any]:
    """Read and validate a checkpoint payload"""
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except FileNotFoundError as err:
        raise CheckpointException(f"Checkpoint {path} not found!") from err
    except Exception as err:
        raise CheckpointException(f"Checkpoint {path} is corrupt: {err}") from err
    if not isinstance(payload, dict) or any(k not in payload for k in REQUIRED_KEYS):
        raise CheckpointException(f"Checkpoint {path} lacks required entries {REQUIRED_KEYS}.")
    try:
        config = TrainConfig.from_dict(payload["config"])
    except ConfigException as err:
        raise CheckpointException(f"Checkpoint {path} holds an invalid config: {err.message}") from err
    if config.hash() != payload["config_hash"]:
        raise CheckpointException(f"Checkpoint {path}: config does not match its hash.")
    return payload


def model_from_checkpoint(
    path: PathLike,
    text_branch: bool = False,
    expected: Optional[TrainConfig] = None,
    feature_source: Optional[PrecomputedFeatures] = None,
    map_location: str = "cpu",
) -> CamouflageSegmenter:
    """Rebuild a model from a checkpoint, by default without the text branch.

    :param path:
        Checkpoint file
    :param text_branch:
        Also restore the text encoder and projectors
    :param expected:
        Config whose backbone must agree with the checkpoint's
    :param feature_source:
        Precomputed feature lookup replacing the visual backbone
    """
    payload = load_checkpoint(path, map_location)
    config = TrainConfig.from_dict(payload["config"])
    if expected is not None and expected.backbone != config.backbone:
        raise CheckpointException(
            f"Checkpoint backbone {config.backbone} does not match the requested "
            f"{expected.backbone}."
        )
    model = CamouflageSegmenter(
        config, text_branch=text_branch and config.use_consistency, feature_source=feature_source
    )
    state = payload["model_state"]
    if not model.text_branch:
        state = strip_text_branch(state)
    if feature_source is not None:
        state = {k: v for k, v in state.items() if not k.startswith("backbone.")}
    try:
        model.load_state_dict(state)
    except RuntimeError as err:
        raise CheckpointException(f"Checkpoint {path} does not fit the model: {err}") from err
    model.eval()
    return model
