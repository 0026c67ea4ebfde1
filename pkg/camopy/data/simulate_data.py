"""
Functions that generate synthetic camouflage data sets.

Each sample is a textured background with one foreground object whose fill is a
perturbed copy of the background texture. The generator's knobs (texture
similarity, colour shift, shading, clutter, image degradation, ...) are
recorded as deterministic attribute proportions, so synthetic samples carry
the same annotations as real ones.
"""
import logging
import pathlib
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from tqdm.auto import tqdm

from camopy.custom_exceptions import ConfigException
from camopy.data.manifest import (
    DatasetManifest,
    ManifestEntry,
    fixation_from_mask,
    write_manifest,
)
from camopy.data.taxonomy import AttributeTaxonomy
from camopy.utils import renormalize

logger = logging.getLogger(__name__)

SHAPES = ("ellipse", "blob", "triangle", "rectangle")
MANIFEST_NAME = "manifest.jsonl"

_COLOR_NAMES = {
    "black": (0.1, 0.1, 0.1),
    "grey": (0.5, 0.5, 0.5),
    "white": (0.9, 0.9, 0.9),
    "red": (0.7, 0.2, 0.2),
    "orange": (0.85, 0.5, 0.15),
    "yellow": (0.85, 0.8, 0.25),
    "green": (0.25, 0.6, 0.25),
    "olive": (0.45, 0.45, 0.2),
    "blue": (0.2, 0.3, 0.75),
    "brown": (0.45, 0.3, 0.15),
    "purple": (0.5, 0.25, 0.6),
}


@dataclass(frozen=True)
class SynthConfig:
    """
    Knob ranges of the synthetic generator.

    :param canvas:
        Side length of the square rasters in pixels
    :param fixation_sigma:
        Blur of the fixation surrogate as a fraction of ``canvas``; 0 gives the
        normalized mask
    :param scale_range:
        Object diameter as a fraction of ``canvas``
    :param similarity_range:
        Share of the object fill copied from the background texture
    :param max_color_shift:
        Largest per-channel shift of the object palette
    :param max_clutter:
        Largest number of distractor patches drawn on the background
    :param max_blur:
        Largest Gaussian blur as a fraction of ``canvas``
    :param max_downsample:
        Largest down-then-up resampling factor
    :param degradation_probability:
        Chance that each image-quality degradation is applied
    :param baseline:
        Share every attribute receives before renormalization
    :param shapes:
        Object shapes drawn from
    """

    canvas: int = 96
    fixation_sigma: float = 0.05
    scale_range: Tuple[float, float] = (0.25, 0.5)
    similarity_range: Tuple[float, float] = (0.5, 0.95)
    max_color_shift: float = 0.3
    max_clutter: int = 4
    max_blur: float = 0.015
    max_downsample: int = 4
    degradation_probability: float = 0.5
    baseline: float = 0.02
    shapes: Tuple[str, ...] = SHAPES

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        object.__setattr__(self, "similarity_range", tuple(self.similarity_range))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.canvas < 16:
            raise ConfigException(f"canvas must be at least 16 pixels, got {self.canvas}")
        if self.fixation_sigma < 0:
            raise ConfigException("fixation_sigma must be nonnegative")
        low, high = self.scale_range
        if not 0 < low <= high < 1:
            raise ConfigException(f"scale_range must satisfy 0 < low <= high < 1, got {self.scale_range}")
        low, high = self.similarity_range
        if not 0 <= low <= high <= 1:
            raise ConfigException(f"similarity_range must lie in [0, 1], got {self.similarity_range}")
        if not 0 <= self.degradation_probability <= 1:
            raise ConfigException("degradation_probability must lie in [0, 1]")
        if self.max_downsample < 1 or self.max_clutter < 0:
            raise ConfigException("max_downsample must be >= 1 and max_clutter >= 0")
        if self.baseline <= 0:
            raise ConfigException("baseline must be positive")
        unknown = set(self.shapes) - set(SHAPES)
        if not self.shapes or unknown:
            raise ConfigException(f"shapes must be a non-empty subset of {SHAPES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CamouflageKnobs:
    """The per-sample knob values a synthetic sample was rendered with"""

    shape: str
    scale: float
    similarity: float
    color_shift: float
    shading: float
    disruptive: float
    irregularity: float
    rotation: float
    transparency: float
    clutter: int
    occlusion: float
    blur: float
    downsample: int
    darkness: float
    contrast: float


def _texture(rng: np.random.Generator, size: int, n_gratings: int = 3) -> np.ndarray:
    """Sum of random gratings and smoothed noise, scaled to [0, 1]"""
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size))
    for _ in range(n_gratings):
        freq = rng.uniform(2, 8)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=max(size * 0.03, 0.5))
    tex = tex / n_gratings + 0.5 * noise / (noise.std() + 1e-12)
    return (tex - tex.min()) / (np.ptp(tex) + 1e-12)


def _colorize(texture: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    return low * (1 - texture)[..., None] + high * texture[..., None]


def _shape_mask(
    shape: str,
    size: int,
    center: Tuple[float, float],
    radius: float,
    rotation: float,
    irregularity: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Boolean support of one object shape"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    u = dx * np.cos(rotation) + dy * np.sin(rotation)
    v = -dx * np.sin(rotation) + dy * np.cos(rotation)
    aspect = 1.0 - 0.5 * irregularity
    if shape == "ellipse":
        return (u / radius) ** 2 + (v / (radius * aspect)) ** 2 <= 1
    if shape == "rectangle":
        return (np.abs(u) <= radius * 0.85) & (np.abs(v) <= radius * 0.85 * aspect)
    if shape == "blob":
        theta = np.arctan2(v, u)
        rho = np.hypot(u, v)
        boundary = np.ones_like(theta)
        for k in range(2, 6):
            amp = rng.uniform(0, 0.3) * irregularity / (k - 1)
            boundary += amp * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
        return rho <= radius * boundary
    if shape == "triangle":
        angles = np.pi / 2 + np.array([0, 2, 4]) * np.pi / 3
        angles = angles + rng.uniform(-0.3, 0.3, 3) * irregularity
        vertices = np.stack([np.cos(angles), np.sin(angles)], axis=1) * radius
        inside = np.ones((size, size), dtype=bool)
        signs = []
        for i in range(3):
            a, b = vertices[i], vertices[(i + 1) % 3]
            signs.append((b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0]))
        inside &= (signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)
        inside |= (signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0)
        return inside
    raise ConfigException(f"Shape {shape} not found!")


def _draw_knobs(rng: np.random.Generator, config: SynthConfig) -> CamouflageKnobs:
    p = config.degradation_probability

    def maybe(value):
        return value if rng.uniform() < p else type(value)(0)

    downsample = int(rng.integers(2, config.max_downsample + 1)) if config.max_downsample > 1 else 1
    return CamouflageKnobs(
        shape=str(rng.choice(list(config.shapes))),
        scale=float(rng.uniform(*config.scale_range)),
        similarity=float(rng.uniform(*config.similarity_range)),
        color_shift=float(rng.uniform(0, config.max_color_shift)),
        shading=float(rng.uniform(0, 1)),
        disruptive=maybe(float(rng.uniform(0, 1))),
        irregularity=float(rng.uniform(0, 1)),
        rotation=float(rng.uniform(0, np.pi)),
        transparency=maybe(float(rng.uniform(0, 1))),
        clutter=maybe(int(rng.integers(1, config.max_clutter + 1))) if config.max_clutter else 0,
        occlusion=maybe(float(rng.uniform(0.3, 1))),
        blur=maybe(float(rng.uniform(0.3, 1))),
        downsample=max(1, maybe(downsample)),
        darkness=maybe(float(rng.uniform(0, 1))),
        contrast=1.0 - maybe(float(rng.uniform(0, 0.7))),
    )


def knob_attributes(
    knobs: CamouflageKnobs, config: SynthConfig, taxonomy: AttributeTaxonomy
) -> Dict[str, float]:
    """Attribute proportions implied by a sample's knobs.

    Every attribute receives ``config.baseline`` plus a knob-driven score; names
    the generator has no knob for keep the baseline only. The result sums to one.

    :param knobs:
        The sample's knob values
    :param config:
        The generator configuration
    :param taxonomy:
        Taxonomy fixing the attribute order
    """
    scale_low, scale_high = config.scale_range
    small = 1 - (knobs.scale - scale_low) / max(scale_high - scale_low, 1e-12)
    scores = {
        "environmental_pattern_matching": knobs.similarity,
        "color_matching": 1 - knobs.color_shift / max(config.max_color_shift, 1e-12),
        "environmental_shading": knobs.shading,
        "environmental_textures": 0.6 * knobs.similarity,
        "occlusion": knobs.occlusion,
        "background_clutter": knobs.clutter / max(config.max_clutter, 1),
        "shape_mimicry": knobs.irregularity,
        "disruptive_coloration": knobs.disruptive,
        "countershading": 0.5 * knobs.shading,
        "transparency": knobs.transparency,
        "small_object_size": small,
        "body_posture": 0.5 * knobs.rotation / np.pi,
        "surface_texture_mimicry": 0.8 * knobs.similarity,
        "low_resolution": (knobs.downsample - 1) / max(config.max_downsample - 1, 1),
        "blur": knobs.blur,
        "poor_illumination": knobs.darkness,
        "low_contrast": 1 - knobs.contrast,
    }
    raw = np.array(
        [config.baseline + max(float(scores.get(a, 0.0)), 0.0) for a in taxonomy.attributes]
    )
    proportions = renormalize(raw)
    return {a: float(v) for a, v in zip(taxonomy.attributes, proportions)}


def _color_name(rgb: np.ndarray) -> str:
    names = list(_COLOR_NAMES)
    distances = [np.sum((rgb - np.array(_COLOR_NAMES[n])) ** 2) for n in names]
    return names[int(np.argmin(distances))]


def _describe(knobs: CamouflageKnobs, fg_color: np.ndarray, bg_color: np.ndarray) -> str:
    """Template sentence naming the object's shape and texture"""
    if knobs.scale < 0.33:
        size_word = "small"
    elif knobs.scale < 0.42:
        size_word = "medium-sized"
    else:
        size_word = "large"
    if knobs.similarity > 0.85:
        texture = "nearly identical"
    elif knobs.similarity > 0.7:
        texture = "closely matching"
    else:
        texture = "loosely matching"
    sentence = (
        f"A {size_word} {_color_name(fg_color)} {knobs.shape} with a {texture} "
        f"texture blends into the {_color_name(bg_color)} patterned background"
    )
    extras = []
    if knobs.occlusion > 0:
        extras.append("partly hidden behind a bar")
    if knobs.clutter > 0:
        extras.append("among similar clutter")
    if knobs.blur > 0 or knobs.downsample > 1:
        extras.append("in a blurry image")
    if knobs.darkness > 0.3:
        extras.append("under dim light")
    if extras:
        sentence += ", " + ", ".join(extras)
    return sentence + "."


def generate_camouflage_sample(
    rng: np.random.Generator,
    config: SynthConfig,
    taxonomy: AttributeTaxonomy,
) -> dict:
    """Render one synthetic sample in memory.

    Returns a dictionary with ``image`` (uint8 H x W x 3), ``mask`` (uint8 {0, 1}),
    ``fixation`` (float64, sums to one), ``description``, ``attributes`` and
    ``knobs``.

    :param rng:
        Source of randomness; the output is a pure function of its state
    :param config:
        Generator configuration
    :param taxonomy:
        Taxonomy fixing the attribute order

    Example
    --------
    >>> import numpy as np
    >>> from camopy.data import load_taxonomy
    >>> from camopy.data.simulate_data import SynthConfig, generate_camouflage_sample
    >>> s = generate_camouflage_sample(
    ...     np.random.default_rng(0), SynthConfig(canvas=32), load_taxonomy()
    ... )
    >>> s["image"].shape, round(s["fixation"].sum(), 6)
    ((32, 32, 3), 1.0)
    """
    size = config.canvas
    knobs = _draw_knobs(rng, config)

    bg_tex = _texture(rng, size)
    bg_low, bg_high = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    background = _colorize(bg_tex, bg_low, bg_high)

    # the object fill: shifted background texture mixed with fresh texture
    shift = tuple(int(s) for s in rng.integers(size // 4, size // 2, 2))
    fg_tex = knobs.similarity * np.roll(bg_tex, shift, axis=(0, 1))
    fg_tex = fg_tex + (1 - knobs.similarity) * _texture(rng, size)
    if knobs.disruptive > 0:
        patches = gaussian_filter(rng.standard_normal((size, size)), sigma=size * 0.05)
        flipped = np.where(patches > 0.5 * patches.std(), 1 - fg_tex, fg_tex)
        fg_tex = knobs.disruptive * flipped + (1 - knobs.disruptive) * fg_tex
    fg_low = np.clip(bg_low + knobs.color_shift * rng.standard_normal(3), 0, 1)
    fg_high = np.clip(bg_high + knobs.color_shift * rng.standard_normal(3), 0, 1)
    foreground = _colorize(fg_tex, fg_low, fg_high)

    direction = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    ramp = xx * np.cos(direction) + yy * np.sin(direction)
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    foreground = foreground * (1 - 0.5 * knobs.shading * ramp)[..., None]

    for _ in range(knobs.clutter):
        radius = rng.uniform(0.05, 0.12) * size
        center = tuple(rng.uniform(radius, size - radius, 2))
        patch = _shape_mask("ellipse", size, center, radius, rng.uniform(0, np.pi), 0.5, rng)
        background = np.where(patch[..., None], foreground, background)

    radius = knobs.scale * size / 2
    center = tuple(rng.uniform(radius, size - radius, 2))
    support = _shape_mask(
        knobs.shape, size, center, radius, knobs.rotation, knobs.irregularity, rng
    )
    if knobs.occlusion > 0:
        angle = rng.uniform(0, np.pi)
        offset = (xx * size - center[1]) * np.sin(angle) - (yy * size - center[0]) * np.cos(angle)
        bar = np.abs(offset) <= 0.25 * knobs.occlusion * radius
        if (support & ~bar).any():
            support = support & ~bar
    if not support.any():
        cy, cx = (int(round(c)) for c in center)
        support[cy, cx] = True

    alpha = support * (1 - 0.6 * knobs.transparency)
    image = background * (1 - alpha[..., None]) + foreground * alpha[..., None]

    if knobs.darkness > 0:
        image = image * (1 - 0.6 * knobs.darkness)
    if knobs.contrast < 1:
        image = image.mean() + (image - image.mean()) * knobs.contrast
    if knobs.blur > 0:
        sigma = knobs.blur * config.max_blur * size
        image = gaussian_filter(image, sigma=(sigma, sigma, 0))
    image = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    if knobs.downsample > 1:
        small = max(size // knobs.downsample, 4)
        img = Image.fromarray(image).resize((small, small), Image.Resampling.BILINEAR)
        image = np.asarray(img.resize((size, size), Image.Resampling.BILINEAR))

    mask = support.astype(np.uint8)
    return {
        "image": image,
        "mask": mask,
        "fixation": fixation_from_mask(mask, config.fixation_sigma * size),
        "description": _describe(knobs, (fg_low + fg_high) / 2, (bg_low + bg_high) / 2),
        "attributes": knob_attributes(knobs, config, taxonomy),
        "knobs": knobs,
    }


def _save_fixation(fixation: np.ndarray, path: pathlib.Path) -> None:
    """Write a fixation map as a 16-bit PNG scaled to its maximum"""
    peak = fixation.max()
    scaled = fixation / peak if peak > 0 else fixation
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)


def synth_generate(
    n: int,
    seed: int,
    out_dir: Union[str, pathlib.Path],
    canvas: Optional[int] = None,
    config: Optional[SynthConfig] = None,
    taxonomy: Optional[AttributeTaxonomy] = None,
    split: str = "train",
    progressbar: bool = False,
) -> DatasetManifest:
    """Generate a synthetic camouflage data set on disk.

    Writes ``images/``, ``masks/`` and ``fixations/`` PNGs plus
    ``manifest.jsonl`` into ``out_dir``. Sample ``i`` is drawn from
    ``np.random.default_rng([seed, i])``, so outputs are byte-identical for a
    given ``(n, seed, canvas, config)``.

    :param n:
        Number of samples, at least one
    :param seed:
        Random seed
    :param out_dir:
        Caller-owned output directory, created if needed
    :param canvas:
        Side length in pixels, overriding ``config.canvas``
    :param config:
        Generator configuration
    :param taxonomy:
        Taxonomy fixing the attribute names; the bundled one by default
    :param split:
        Split written to the manifest
    :param progressbar:
        Show a progress bar
    """
    if n < 1:
        raise ConfigException(f"n must be at least 1, got {n}")
    config = config or SynthConfig()
    if canvas is not None:
        config = SynthConfig(**{**config.to_dict(), "canvas": canvas})
    if taxonomy is None:
        from camopy.data.datasets import load_taxonomy

        taxonomy = load_taxonomy()

    out_dir = pathlib.Path(out_dir)
    for sub in ("images", "masks", "fixations"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    for i in tqdm(range(n), desc="synth", disable=not progressbar):
        sample = generate_camouflage_sample(
            np.random.default_rng([seed, i]), config, taxonomy
        )
        stem = f"{i:05d}"
        image_path = f"images/{stem}.png"
        mask_path = f"masks/{stem}.png"
        fixation_path = f"fixations/{stem}.png"
        Image.fromarray(sample["image"]).save(out_dir / image_path)
        Image.fromarray(sample["mask"] * 255).save(out_dir / mask_path)
        _save_fixation(sample["fixation"], out_dir / fixation_path)
        entries.append(
            ManifestEntry(
                image_path=image_path,
                mask_path=mask_path,
                description=sample["description"],
                attributes=sample["attributes"],
                fixation_path=fixation_path,
            )
        )

    manifest = DatasetManifest(entries=entries, split=split, root=out_dir, taxonomy=taxonomy)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info("Generated %d synthetic samples in %s", n, out_dir)
    return manifest
