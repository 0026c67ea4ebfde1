"""
Visual and text encoders.

- :class:`ToyVisualBackbone`: a small pre-norm transformer over patch embeddings
  that exposes three tapped intermediate layers as :class:`MultiLevelFeatures`
- :class:`ToyTextEncoder`: a hashed token embedding with mean pooling that
  produces one :class:`TextFeature` per description
- :func:`write_feature_file`, :func:`read_feature_file` and
  :class:`PrecomputedFeatures`: the on-disk container for features produced by
  an external pretrained backbone
"""
import hashlib
import json
import pathlib
import struct
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from einops import rearrange
from torch import nn

from camopy.config import BackboneConfig
from camopy.custom_exceptions import ShapeMismatchException
from camopy.utils import split_words

#: Per-channel RGB statistics the image tensors are standardized with.
IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)

FEATURE_MAGIC = b"CAMOFEAT"
FEATURE_SUFFIX = ".feat"
PAD_ID = 0


@dataclass
class MultiLevelFeatures:
    """
    Three token matrices tapped from shallow, middle and deep encoder layers.

    :param levels:
        Three tensors of shape (B, L, C)
    :param grid:
        Patch grid (rows, cols)
    :param cls_present:
        Whether token 0 of every level is a class token
    """

    levels: Tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    grid: Tuple[int, int]
    cls_present: bool = False

    def __post_init__(self):
        self.levels = tuple(self.levels)
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.levels) != 3:
            raise ShapeMismatchException(
                f"Expected 3 feature levels, got {len(self.levels)}."
            )
        shape = self.levels[0].shape
        if any(level.dim() != 3 for level in self.levels):
            raise ShapeMismatchException(
                f"Feature levels must be (B, L, C) tensors, got "
                f"{[tuple(level.shape) for level in self.levels]}."
            )
        if any(level.shape != shape for level in self.levels):
            raise ShapeMismatchException(
                f"Feature levels disagree in shape: "
                f"{[tuple(level.shape) for level in self.levels]}."
            )
        expected = self.grid[0] * self.grid[1] + int(self.cls_present)
        if shape[1] != expected:
            raise ShapeMismatchException(
                f"Grid {self.grid} (cls={self.cls_present}) needs {expected} tokens, "
                f"got {shape[1]}."
            )

    @property
    def batch_size(self) -> int:
        return self.levels[0].shape[0]

    @property
    def num_tokens(self) -> int:
        return self.levels[0].shape[1]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]

    def to(self, *args, **kwargs) -> "MultiLevelFeatures":
        """Move or cast all levels, as :meth:`torch.Tensor.to`"""
        return MultiLevelFeatures(
            tuple(level.to(*args, **kwargs) for level in self.levels),
            self.grid,
            self.cls_present,
        )

    def detach(self) -> "MultiLevelFeatures":
        return MultiLevelFeatures(
            tuple(level.detach() for level in self.levels), self.grid, self.cls_present
        )


@dataclass
class TextFeature:
    """
    Sentence-level description embeddings.

    :param sentence_embedding:
        Tensor of shape (B, D_t)
    """

    sentence_embedding: torch.Tensor

    def __post_init__(self):
        if self.sentence_embedding.dim() != 2:
            raise ShapeMismatchException(
                f"Sentence embeddings must be (B, D_t), got "
                f"{tuple(self.sentence_embedding.shape)}."
            )


def images_to_tensor(images: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """Convert uint8 H x W x 3 (or B x H x W x 3) rasters into standardized
    float tensors of shape (B, 3, H, W)."""
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(np.ascontiguousarray(images))
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.dim() != 4 or images.shape[-1] != 3:
        raise ShapeMismatchException(
            f"Expected H x W x 3 rasters, got shape {tuple(images.shape)}."
        )
    x = rearrange(images.float() / 255.0, "b h w c -> b c h w")
    mean = torch.tensor(IMAGE_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGE_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def sinusoidal_positions_2d(rows: int, cols: int, channels: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position codes of shape (rows * cols, channels).

    Half of the channels encode the row, half the column.
    """
    half = channels // 2
    quarter = max(half // 2, 1)
    freqs = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))

    def encode(positions: torch.Tensor, width: int) -> torch.Tensor:
        angles = positions[:, None].double() * freqs[None, :]
        code = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
        return code[:, :width]

    yy, xx = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    pos = torch.cat(
        [encode(yy.flatten(), half), encode(xx.flatten(), channels - half)], dim=1
    )
    if pos.shape[1] < channels:
        pos = torch.cat([pos, torch.zeros(pos.shape[0], channels - pos.shape[1])], 1)
    return pos.float()


class _FrozenMixin:
    """Keep frozen encoders in eval mode with gradients disabled"""

    frozen: bool = False

    def freeze(self):
        self.frozen = True
        self.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True):
        if self.frozen:
            mode = False
        return super().train(mode)


class ToyVisualBackbone(_FrozenMixin, nn.Module):
    """
    Pre-norm transformer encoder over non-overlapping patch embeddings with
    fixed sinusoidal positions. The outputs of ``cfg.tap_layers`` are returned.

    :param cfg:
        Backbone geometry

    Example
    --------
    >>> import torch
    >>> from camopy.config import BackboneConfig
    >>> from camopy.encoders import ToyVisualBackbone
    >>> cfg = BackboneConfig(image_size=64, patch_size=8, channels=64, depth=6, heads=4)
    >>> feats = ToyVisualBackbone(cfg)(torch.zeros(2, 3, 64, 64))
    >>> tuple(feats.levels[0].shape), feats.grid
    ((2, 64, 64), (8, 8))
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.patch_embed = nn.Conv2d(3, c, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        rows, cols = cfg.grid
        self.register_buffer("positions", sinusoidal_positions_2d(rows, cols, c))
        self.cls = nn.Parameter(torch.zeros(1, 1, c)) if cfg.cls_token else None
        self.layers = nn.ModuleList(
            [
                nn.TransformerEncoderLayer(
                    d_model=c,
                    nhead=cfg.heads,
                    dim_feedforward=4 * c,
                    dropout=0.0,
                    activation="gelu",
                    batch_first=True,
                    norm_first=True,
                )
                for _ in range(cfg.depth)
            ]
        )
        if cfg.frozen:
            self.freeze()

    def forward(self, images: torch.Tensor) -> MultiLevelFeatures:
        size = self.cfg.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, size, size):
            raise ShapeMismatchException(
                f"Expected images of shape (B, 3, {size}, {size}), got "
                f"{tuple(images.shape)}."
            )
        x = rearrange(self.patch_embed(images), "b c h w -> b (h w) c")
        x = x + self.positions
        if self.cls is not None:
            x = torch.cat([self.cls.expand(x.shape[0], -1, -1), x], dim=1)
        taps = []
        for depth, layer in enumerate(self.layers, start=1):
            x = layer(x)
            if depth in self.cfg.tap_layers:
                taps.append(x)
        return MultiLevelFeatures(tuple(taps), self.cfg.grid, self.cfg.cls_token)


def encode_visual(
    images: Union[np.ndarray, torch.Tensor], backbone: ToyVisualBackbone
) -> MultiLevelFeatures:
    """Encode uint8 rasters of shape H x W x 3 or B x H x W x 3.

    :param images:
        Rasters at the backbone's image size
    :param backbone:
        The visual encoder
    """
    size = backbone.cfg.image_size
    shape = tuple(images.shape)
    if shape[-3:-1] != (size, size):
        raise ShapeMismatchException(
            f"Expected {size}x{size} images, got {shape[-3]}x{shape[-2]}."
        )
    device = next(backbone.parameters()).device
    return backbone(images_to_tensor(images).to(device))


def _token_id(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (vocab_size - 1)


class ToyTextEncoder(_FrozenMixin, nn.Module):
    """
    Hashed word embedding with mean pooling over non-padding tokens.

    Words are mapped to ``vocab_size - 1`` buckets with BLAKE2b; id 0 is
    padding. The empty description embeds to the zero vector.

    :param cfg:
        Supplies ``text_dim``, ``vocab_size``, ``max_words`` and ``frozen``
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.text_dim, padding_idx=PAD_ID)
        if cfg.frozen:
            self.freeze()

    def tokenize(self, descriptions: Sequence[str]) -> torch.Tensor:
        """Token ids of shape (B, max_words), truncated and zero padded"""
        wl = self.cfg.max_words
        ids = torch.full((len(descriptions), wl), PAD_ID, dtype=torch.long)
        for i, text in enumerate(descriptions):
            words = split_words(text)
            if len(words) > wl:
                warnings.warn(
                    f"Description with {len(words)} words truncated to {wl} tokens.",
                    UserWarning,
                )
                words = words[:wl]
            for j, word in enumerate(words):
                ids[i, j] = _token_id(word, self.cfg.vocab_size)
        return ids

    def forward(self, token_ids: torch.Tensor) -> TextFeature:
        device = self.embedding.weight.device
        token_ids = token_ids.to(device)
        present = (token_ids != PAD_ID).unsqueeze(-1).to(self.embedding.weight.dtype)
        summed = (self.embedding(token_ids) * present).sum(dim=1)
        counts = present.sum(dim=1).clamp(min=1)
        return TextFeature(summed / counts)

    def encode(self, descriptions: Sequence[str]) -> TextFeature:
        return self(self.tokenize(descriptions))


def encode_text(
    descriptions: Union[str, Sequence[str]], encoder: ToyTextEncoder
) -> TextFeature:
    """Embed one description or a batch of them"""
    if isinstance(descriptions, str):
        descriptions = [descriptions]
    return encoder.encode(list(descriptions))


def write_feature_file(
    path: Union[str, pathlib.Path], features: MultiLevelFeatures, index: int = 0
) -> pathlib.Path:
    """Write one image's three feature levels to a ``.feat`` container.

    The container is the 8-byte magic ``CAMOFEAT``, the little-endian uint64
    length of a UTF-8 JSON header, the header, then the raw little-endian level
    arrays at the offsets the header lists (relative to the end of the header).

    :param path:
        Destination file
    :param features:
        Batched features
    :param index:
        Which batch element to write
    """
    arrays = [
        level[index].detach().cpu().numpy().astype(np.dtype("<f4"))
        for level in features.levels
    ]
    levels, offset = [], 0
    for array in arrays:
        levels.append(
            {
                "dtype": array.dtype.str,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": array.nbytes,
            }
        )
        offset += array.nbytes
    header = json.dumps(
        {"grid": list(features.grid), "cls_present": features.cls_present, "levels": levels}
    ).encode("utf-8")
    path = pathlib.Path(path)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for array in arrays:
            f.write(array.tobytes())
    return path


def read_feature_file(path: Union[str, pathlib.Path]) -> MultiLevelFeatures:
    """Read a ``.feat`` container into batch-of-one features"""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != FEATURE_MAGIC:
        raise ShapeMismatchException(f"{path} is not a feature file.")
    (length,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + length].decode("utf-8"))
    start = 16 + length
    levels = []
    for level in header["levels"]:
        begin = start + level["offset"]
        array = np.frombuffer(
            blob[begin : begin + level["nbytes"]], dtype=np.dtype(level["dtype"])
        ).reshape(level["shape"])
        levels.append(torch.from_numpy(array.astype(np.float32)).unsqueeze(0))
    return MultiLevelFeatures(tuple(levels), tuple(header["grid"]), header["cls_present"])


class PrecomputedFeatures:
    """
    Look up features produced by an external backbone, one ``<stem>.feat`` file
    per image.

    :param directory:
        Folder of ``.feat`` files
    :param cfg:
        Optional geometry the files must match
    """

    def __init__(
        self, directory: Union[str, pathlib.Path], cfg: Optional[BackboneConfig] = None
    ):
        self.directory = pathlib.Path(directory)
        self.cfg = cfg

    def path_for(self, name: str) -> pathlib.Path:
        return self.directory / f"{pathlib.PurePath(name).stem}{FEATURE_SUFFIX}"

    def __call__(self, names: Sequence[str]) -> MultiLevelFeatures:
        loaded: List[MultiLevelFeatures] = [read_feature_file(self.path_for(n)) for n in names]
        first = loaded[0]
        for feats in loaded[1:]:
            if (feats.grid, feats.cls_present, feats.channels) != (
                first.grid,
                first.cls_present,
                first.channels,
            ):
                raise ShapeMismatchException(
                    f"Feature files disagree in geometry: {first.grid} vs {feats.grid}."
                )
        if self.cfg is not None and (first.grid, first.channels) != (
            self.cfg.grid,
            self.cfg.channels,
        ):
            raise ShapeMismatchException(
                f"Feature files hold grid {first.grid} x {first.channels}, expected "
                f"{self.cfg.grid} x {self.cfg.channels}."
            )
        levels = tuple(
            torch.cat([f.levels[i] for f in loaded], dim=0) for i in range(3)
        )
        return MultiLevelFeatures(levels, first.grid, first.cls_present)
