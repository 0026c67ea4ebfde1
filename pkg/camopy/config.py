"""
Configuration dataclasses for the model components and the training run.

Every config validates itself on construction and raises
:class:`~camopy.custom_exceptions.ConfigException` on invalid values. A
:class:`TrainConfig` is read from and written to a single YAML document whose
sections mirror the nested dataclasses.

Example
--------
>>> from camopy.config import load_config
>>> cfg = load_config("default")
>>> cfg.backbone.image_size, cfg.backbone.tap_layers, cfg.fixation.blocks
(336, (8, 16, 24), 3)
"""
import math
import pathlib
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from camopy.custom_exceptions import ConfigException
from camopy.data.taxonomy import N_ATTRIBUTES
from camopy.utils import config_hash


def _check_keys(cls, values: Dict[str, Any], section: str) -> None:
    """Reject keys that are not fields of ``cls``"""
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigException(
            f"Unknown key(s) in section {section!r}: {', '.join(unknown)}"
        )


@dataclass(frozen=True)
class BackboneConfig:
    """
    Geometry of the visual and text encoders.

    :param image_size:
        Square input side in pixels
    :param patch_size:
        Patch side in pixels; must divide ``image_size``
    :param channels:
        Token width C
    :param depth:
        Number of transformer layers
    :param heads:
        Attention heads per layer
    :param tap_layers:
        Three strictly increasing 1-based layer indices; defaults to
        ``(ceil(depth/3), ceil(2*depth/3), depth)``
    :param cls_token:
        Prepend a class token to the patch tokens
    :param text_dim:
        Sentence embedding width D_t
    :param max_words:
        Maximum description length WL in tokens
    :param vocab_size:
        Hash buckets of the toy text encoder
    :param frozen:
        Encoders contribute no trainable parameters and run in eval mode
    """

    image_size: int = 336
    patch_size: int = 14
    channels: int = 1024
    depth: int = 24
    heads: int = 16
    tap_layers: Optional[Tuple[int, int, int]] = None
    cls_token: bool = False
    text_dim: int = 512
    max_words: int = 50
    vocab_size: int = 8192
    frozen: bool = False

    def __post_init__(self):
        if self.tap_layers is None:
            d = self.depth
            taps = (math.ceil(d / 3), math.ceil(2 * d / 3), d)
        else:
            taps = tuple(int(t) for t in self.tap_layers)
        object.__setattr__(self, "tap_layers", taps)
        if min(self.image_size, self.patch_size, self.channels, self.depth) < 1:
            raise ConfigException("Backbone sizes must be positive integers.")
        if self.image_size % self.patch_size:
            raise ConfigException(
                f"image_size {self.image_size} is not divisible by patch_size "
                f"{self.patch_size}."
            )
        if self.channels % self.heads:
            raise ConfigException(
                f"channels {self.channels} is not divisible by heads {self.heads}."
            )
        if len(taps) != 3 or not 1 <= taps[0] < taps[1] < taps[2] <= self.depth:
            raise ConfigException(
                f"tap_layers must be three strictly increasing layers in "
                f"[1, {self.depth}], got {taps}."
            )
        if self.max_words < 1 or self.text_dim < 1 or self.vocab_size < 2:
            raise ConfigException("max_words, text_dim and vocab_size must be positive.")

    @property
    def grid(self) -> Tuple[int, int]:
        """Patch grid (rows, cols)"""
        side = self.image_size // self.patch_size
        return (side, side)

    @property
    def num_tokens(self) -> int:
        """Tokens per level, including the class token when present"""
        rows, cols = self.grid
        return rows * cols + int(self.cls_token)


@dataclass(frozen=True)
class FixationDecoderConfig:
    """
    :param blocks:
        Number N of cascaded cross-attention decoder blocks
    :param heads:
        Attention heads
    :param mlp_ratio:
        Feed-forward width as a multiple of C
    :param conv_kernel:
        Kernel of the final 2-D convolution on the fixation grid
    :param positional:
        Learn the positional embedding P_s; when false it is fixed at zero
    """

    blocks: int = 3
    heads: int = 8
    mlp_ratio: float = 4.0
    conv_kernel: int = 3
    positional: bool = True

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigException(f"Fixation decoder needs N >= 1, got {self.blocks}.")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigException("conv_kernel must be a positive odd integer.")


@dataclass(frozen=True)
class AttributeHeadConfig:
    """
    :param hidden:
        Width of the hidden layer
    :param dropout:
        Dropout rate between the two linear layers
    :param n_attributes:
        Output size; fixed by the taxonomy
    """

    hidden: int = 256
    dropout: float = 0.1
    n_attributes: int = N_ATTRIBUTES

    def __post_init__(self):
        if not 0 <= self.dropout < 1:
            raise ConfigException(f"dropout must lie in [0, 1), got {self.dropout}.")
        if self.n_attributes != N_ATTRIBUTES:
            raise ConfigException(f"n_attributes must be {N_ATTRIBUTES}.")


@dataclass(frozen=True)
class AFEConfig:
    """
    :param weights:
        Positive weights of the shallow, middle and deep branches
    :param reduction:
        Bottleneck ratio of the squeeze-and-excitation gate
    """

    weights: Tuple[float, float, float] = (1.0, 2.0, 4.0)
    reduction: int = 4

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != 3 or min(self.weights) <= 0:
            raise ConfigException(
                f"AFE needs three positive branch weights, got {self.weights}."
            )
        if self.reduction < 1:
            raise ConfigException("reduction must be at least 1.")

    @property
    def m_norm(self) -> float:
        """Normalization constant, the sum of the branch weights"""
        return math.fsum(self.weights)


@dataclass(frozen=True)
class MaskDecoderConfig:
    """
    :param blocks:
        Number M_dec of self-attention decoder blocks
    :param heads:
        Attention heads
    :param mlp_ratio:
        Feed-forward width as a multiple of C
    :param conv_channels:
        Channels of the Conv-BN-ReLU block
    :param upsample:
        Bilinear upsampling factor applied after the CBR block
    """

    blocks: int = 1
    heads: int = 8
    mlp_ratio: float = 4.0
    conv_channels: int = 64
    upsample: int = 4

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigException(f"Mask decoder needs M_dec >= 1, got {self.blocks}.")
        if self.conv_channels < 1 or self.upsample < 1:
            raise ConfigException("conv_channels and upsample must be positive.")


@dataclass(frozen=True)
class ProjectionConfig:
    """
    :param shared_dim:
        Width D_s of the shared latent space
    :param hidden:
        Hidden width of both two-layer projectors
    """

    shared_dim: int = 256
    hidden: int = 512

    def __post_init__(self):
        if self.shared_dim < 1 or self.hidden < 1:
            raise ConfigException("Projection sizes must be positive.")


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights of the fixation, attribute and consistency terms"""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigException(f"Loss weight {name} must be >= 0, got {value}.")


_SECTIONS = {
    "backbone": BackboneConfig,
    "fixation": FixationDecoderConfig,
    "attributes": AttributeHeadConfig,
    "afe": AFEConfig,
    "mask": MaskDecoderConfig,
    "projection": ProjectionConfig,
    "loss": LossWeights,
}


@dataclass(frozen=True)
class TrainConfig:
    """
    A complete training run.

    :param epochs:
        Number of passes over the training manifest
    :param lr:
        Initial Adam learning rate
    :param lr_decay:
        Multiplicative decay applied after each milestone
    :param decay_epochs:
        Epoch milestones; an epoch counter greater than a milestone is decayed
    :param batch_size:
        Samples per step, at least two
    :param hflip:
        Random horizontal flip augmentation
    :param seed:
        Seed of python, numpy, torch and the data loader
    :param max_steps:
        Stop after this many optimizer steps
    :param num_workers:
        Data loader workers; forced to 0 when ``deterministic``
    :param deterministic:
        Request deterministic kernels and serial data loading
    :param progressbar:
        Show tqdm progress bars
    :param use_fixation:
        Build the fixation decoder and fixation attention
    :param use_attributes:
        Build the attribute head and attribute gates
    :param use_consistency:
        Build the text branch and the consistency term
    :param fixation_sigma:
        Blur of the surrogate fixation for records without one
    :param checkpoint_every:
        Write an intermediate checkpoint every this many epochs (0 disables)
    """

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fixation: FixationDecoderConfig = field(default_factory=FixationDecoderConfig)
    attributes: AttributeHeadConfig = field(default_factory=AttributeHeadConfig)
    afe: AFEConfig = field(default_factory=AFEConfig)
    mask: MaskDecoderConfig = field(default_factory=MaskDecoderConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    epochs: int = 200
    lr: float = 1e-4
    lr_decay: float = 0.2
    decay_epochs: Tuple[int, ...] = (150,)
    batch_size: int = 8
    hflip: bool = True
    seed: int = 0
    max_steps: Optional[int] = None
    num_workers: int = 0
    deterministic: bool = True
    progressbar: bool = True
    use_fixation: bool = True
    use_attributes: bool = True
    use_consistency: bool = True
    fixation_sigma: float = 0.05
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.epochs < 1:
            raise ConfigException(f"epochs must be at least 1, got {self.epochs}.")
        if not self.lr > 0:
            raise ConfigException(f"lr must be positive, got {self.lr}.")
        if not 0 < self.lr_decay <= 1:
            raise ConfigException(f"lr_decay must lie in (0, 1], got {self.lr_decay}.")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ConfigException("decay_epochs must be strictly increasing.")
        if any(e < 1 or e >= self.epochs for e in self.decay_epochs):
            raise ConfigException(
                f"decay_epochs {self.decay_epochs} must lie in [1, epochs)."
            )
        if self.batch_size < 2:
            raise ConfigException(
                f"batch_size must be at least 2 for batch normalization, got {self.batch_size}."
            )
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigException("max_steps must be at least 1 when given.")
        if self.num_workers < 0 or self.checkpoint_every < 0:
            raise ConfigException("num_workers and checkpoint_every must be >= 0.")
        if self.fixation_sigma < 0:
            raise ConfigException("fixation_sigma must be nonnegative.")
        for name, section in (("fixation", self.fixation), ("mask", self.mask)):
            if self.backbone.channels % section.heads:
                raise ConfigException(
                    f"channels {self.backbone.channels} is not divisible by "
                    f"{name}.heads {section.heads}."
                )

    @property
    def image_size(self) -> int:
        return self.backbone.image_size

    @property
    def text_branch(self) -> bool:
        """Whether training builds the text encoder and projectors"""
        return self.use_consistency and self.loss.gamma > 0

    def to_dict(self) -> Dict[str, Any]:
        """Nested plain-python form, with tuples as lists"""

        def plain(value):
            if isinstance(value, (tuple, list)):
                return [plain(v) for v in value]
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            return value

        return plain(asdict(self))

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        """Build a config from a nested mapping, rejecting unknown keys"""
        if not isinstance(values, dict):
            raise ConfigException("A training config must be a key-value mapping.")
        _check_keys(cls, values, "train")
        kwargs = dict(values)
        for section, section_cls in _SECTIONS.items():
            if section in kwargs:
                sub = kwargs[section] or {}
                if not isinstance(sub, dict):
                    raise ConfigException(f"Section {section!r} must be a mapping.")
                _check_keys(section_cls, sub, section)
                try:
                    kwargs[section] = section_cls(**sub)
                except TypeError as err:
                    raise ConfigException(f"Section {section!r}: {err}") from err
        try:
            return cls(**kwargs)
        except TypeError as err:
            raise ConfigException(str(err)) from err

    @classmethod
    def from_yaml(cls, path: Union[str, pathlib.Path]) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            values = yaml.safe_load(f) or {}
        return cls.from_dict(values)

    def to_yaml(self, path: Union[str, pathlib.Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    def hash(self) -> str:
        """Stable SHA-256 of the configuration"""
        return config_hash(self.to_dict())

    def replace(self, **changes) -> "TrainConfig":
        """A copy with top-level fields or ``section.field`` keys changed"""
        values = self.to_dict()
        for key, value in changes.items():
            if "." in key:
                section, name = key.split(".", 1)
                values.setdefault(section, {})[name] = value
            else:
                values[key] = value
        return TrainConfig.from_dict(values)


def load_config(name_or_path: Union[str, pathlib.Path]) -> TrainConfig:
    """Load a bundled preset by name (``default``, ``toy``, ``toy96``) or a YAML
    file by path.

    :param name_or_path:
        Preset name or path to a YAML document
    """
    from camopy.data.datasets import PRESETS, preset_path

    if isinstance(name_or_path, str) and name_or_path in PRESETS:
        return TrainConfig.from_yaml(preset_path(name_or_path))
    path = pathlib.Path(name_or_path)
    if not path.exists():
        raise ConfigException(f"Config {name_or_path} not found!")
    return TrainConfig.from_yaml(path)
