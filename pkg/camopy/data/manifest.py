"""
The annotated-sample data model and manifest ingestion.

- ManifestEntry: one record of a line-delimited manifest
- DatasetManifest: validated list of entries for one split
- CamouflageSample: one loaded, resized and normalized instance
- load_manifest / write_manifest: manifest I/O
- load_sample: raster loading and normalization
- attribute_statistics, category_statistics, description_statistics
"""
import json
import logging
import math
import os
import pathlib
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from camopy.custom_exceptions import (
    AttributeSumException,
    DataException,
    ManifestSchemaException,
    RasterDecodeException,
)
from camopy.data.taxonomy import CATEGORIES, AttributeTaxonomy
from camopy.utils import _is_binary_raster, renormalize, split_words

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ATTRIBUTE_SUM_RANGE = (0.98, 1.02)
DEFAULT_MAX_WORDS = 50
#: Blur applied to a mask when a record ships no fixation raster.
DEFAULT_FIXATION_SIGMA = 0.05

PathLike = Union[str, pathlib.Path]


@dataclass(frozen=True)
class ManifestEntry:
    """
    One manifest record. Paths are stored as written in the manifest, relative to
    the manifest file's directory unless absolute.

    :param image_path:
        RGB image (PNG or JPEG)
    :param mask_path:
        Binary mask (8- or 16-bit grayscale PNG)
    :param description:
        Text description of the camouflaged instance
    :param attributes:
        Attribute name -> proportion, in taxonomy order
    :param fixation_path:
        Optional fixation raster (8- or 16-bit grayscale PNG)
    """

    image_path: str
    mask_path: str
    description: str
    attributes: Dict[str, float] = field(hash=False)
    fixation_path: Optional[str] = None

    @property
    def name(self) -> str:
        """Image file stem, used to name per-image outputs"""
        return pathlib.PurePath(self.image_path).stem

    def attribute_vector(self) -> np.ndarray:
        """The proportions as a float64 vector in taxonomy order"""
        return np.array(list(self.attributes.values()), dtype=np.float64)

    def to_record(self, split: str) -> dict:
        """The JSON record written to a manifest line"""
        record = {"image": self.image_path, "mask": self.mask_path}
        if self.fixation_path is not None:
            record["fixation"] = self.fixation_path
        record["description"] = self.description
        record["attributes"] = dict(self.attributes)
        record["split"] = split
        return record


@dataclass
class DatasetManifest:
    """
    A validated manifest: the entries of one split plus the directory their
    relative paths are resolved against.

    :param entries:
        Manifest records
    :param split:
        One of ``train``, ``val``, ``test``
    :param root:
        Directory relative paths are resolved against
    :param taxonomy:
        The taxonomy the attribute maps were validated against
    """

    entries: List[ManifestEntry]
    split: str = "train"
    root: pathlib.Path = field(default=pathlib.Path("."), compare=False)
    taxonomy: Optional[AttributeTaxonomy] = field(default=None, compare=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestSchemaException(
                f"Split must be one of {SPLITS}, got {self.split!r}."
            )
        self.root = pathlib.Path(self.root)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> ManifestEntry:
        return self.entries[index]

    def resolve(self, path: str) -> pathlib.Path:
        """Absolute location of a path stored in an entry"""
        return self.root / path

    @property
    def attribute_names(self) -> List[str]:
        """Attribute names, from the taxonomy or the first entry"""
        if self.taxonomy is not None:
            return list(self.taxonomy.attributes)
        if not self.entries:
            return []
        return list(self.entries[0].attributes)

    def attribute_matrix(self) -> np.ndarray:
        """All attribute vectors stacked into an (n, 17) array"""
        return np.stack([e.attribute_vector() for e in self.entries])

    def to_frame(self) -> pd.DataFrame:
        """One row per entry: paths, description and one column per attribute"""
        rows = []
        for e in self.entries:
            row = {
                "name": e.name,
                "image": e.image_path,
                "mask": e.mask_path,
                "fixation": e.fixation_path,
                "description": e.description,
            }
            row.update(e.attributes)
            rows.append(row)
        return pd.DataFrame(rows)

    def sample(self, index: int, target_size: int = 336, **kwargs) -> "CamouflageSample":
        """Load entry ``index`` with :func:`load_sample`"""
        return load_sample(self.entries[index], target_size, root=self.root, **kwargs)


@dataclass
class CamouflageSample:
    """
    One annotated instance after loading.

    :param name:
        Identifier, the image file stem
    :param image:
        uint8 array H x W x 3
    :param gt_mask:
        uint8 array H x W with values in {0, 1}
    :param gt_fixation:
        float64 array H x W, nonnegative, summing to one
    :param description:
        Text description, at most ``max_words`` words
    :param attr_gt:
        float64 17-vector of proportions summing to one
    :param empty_mask:
        Set when the mask has no foreground pixel
    """

    name: str
    image: np.ndarray
    gt_mask: np.ndarray
    gt_fixation: np.ndarray
    description: str
    attr_gt: np.ndarray
    empty_mask: bool = False

    def __post_init__(self):
        h, w = self.gt_mask.shape
        if self.image.shape != (h, w, 3) or self.gt_fixation.shape != (h, w):
            raise DataException(
                f"Sample {self.name}: image {self.image.shape}, mask {(h, w)} and "
                f"fixation {self.gt_fixation.shape} disagree."
            )
        if not _is_binary_raster(self.gt_mask):
            raise DataException(f"Sample {self.name}: mask is not binary.")
        if np.any(self.gt_fixation < 0) or abs(self.gt_fixation.sum() - 1) > 1e-6:
            raise DataException(
                f"Sample {self.name}: fixation must be nonnegative and sum to 1."
            )
        if abs(math.fsum(self.attr_gt.tolist()) - 1) > 1e-9:
            raise DataException(f"Sample {self.name}: attributes must sum to 1.")


def load_manifest(
    path: PathLike,
    taxonomy: AttributeTaxonomy,
    split: str = "train",
    check_paths: bool = True,
) -> DatasetManifest:
    """Read and validate a line-delimited JSON manifest.

    Each line holds ``{"image", "mask", "fixation"?, "description",
    "attributes": {name: proportion}, "split"?}``. Relative paths are resolved
    against the manifest's directory.

    :param path:
        Manifest file
    :param taxonomy:
        Taxonomy the attribute maps must match exactly
    :param split:
        Split used when records carry none
    :param check_paths:
        Require every referenced file to exist
    """
    path = pathlib.Path(path)
    root = path.parent
    entries: List[ManifestEntry] = []
    splits = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ManifestSchemaException(
                    f"Record {lineno}: not a valid JSON object ({err.msg})."
                ) from err
            if not isinstance(record, dict):
                raise ManifestSchemaException(f"Record {lineno}: not a JSON object.")
            entries.append(_parse_record(record, lineno, taxonomy, root, check_paths))
            if "split" in record:
                splits.add(record["split"])
    if len(splits) > 1:
        raise ManifestSchemaException(
            f"Field 'split': records mix several splits {sorted(splits)}."
        )
    if splits:
        split = splits.pop()
    logger.debug("Loaded %d manifest entries from %s", len(entries), path)
    return DatasetManifest(entries=entries, split=split, root=root, taxonomy=taxonomy)


def _parse_record(
    record: dict,
    lineno: int,
    taxonomy: AttributeTaxonomy,
    root: pathlib.Path,
    check_paths: bool,
) -> ManifestEntry:
    """Validate one manifest record and renormalize its attributes"""
    for key in ("image", "mask", "description"):
        if not isinstance(record.get(key), str):
            raise ManifestSchemaException(
                f"Record {lineno}, field {key!r}: missing or not a string."
            )
    fixation = record.get("fixation")
    if fixation is not None and not isinstance(fixation, str):
        raise ManifestSchemaException(
            f"Record {lineno}, field 'fixation': must be a string or null."
        )
    if check_paths:
        for key in ("image", "mask", "fixation"):
            value = record.get(key)
            if value is not None and not (root / value).exists():
                raise ManifestSchemaException(
                    f"Record {lineno}, field {key!r}: {value} does not exist."
                )

    attributes = record.get("attributes")
    if not isinstance(attributes, dict):
        raise ManifestSchemaException(
            f"Record {lineno}, field 'attributes': missing or not a mapping."
        )
    missing = [a for a in taxonomy.attributes if a not in attributes]
    if missing:
        raise ManifestSchemaException(
            f"Record {lineno}, field 'attributes': missing attribute(s) "
            f"{', '.join(missing)}."
        )
    unknown = sorted(set(attributes) - set(taxonomy.attributes))
    if unknown:
        raise ManifestSchemaException(
            f"Record {lineno}, field 'attributes': unknown attribute(s) "
            f"{', '.join(unknown)}."
        )
    values = []
    for name in taxonomy.attributes:
        value = attributes[name]
        if (
            isinstance(value, bool)
            or not isinstance(value, (int, float))
            or not math.isfinite(value)
            or value < 0
        ):
            raise ManifestSchemaException(
                f"Record {lineno}, field 'attributes.{name}': expected a "
                f"nonnegative number, got {value!r}."
            )
        values.append(float(value))
    total = math.fsum(values)
    low, high = ATTRIBUTE_SUM_RANGE
    if not low <= total <= high:
        raise AttributeSumException(
            f"Record {lineno}, field 'attributes': proportions sum to {total:.4f}, "
            f"outside [{low}, {high}].",
            total=total,
        )
    normalized = renormalize(np.array(values))
    return ManifestEntry(
        image_path=record["image"],
        mask_path=record["mask"],
        description=record["description"],
        attributes={a: float(v) for a, v in zip(taxonomy.attributes, normalized)},
        fixation_path=fixation,
    )


def write_manifest(manifest: DatasetManifest, path: PathLike) -> pathlib.Path:
    """Write a manifest as line-delimited JSON.

    Relative entry paths are rewritten relative to the new file's directory, so
    that the written manifest resolves to the same files.

    :param manifest:
        The manifest to write
    :param path:
        Destination file
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    same_root = path.parent.resolve() == manifest.root.resolve()
    with open(path, "w", encoding="utf-8") as f:
        for entry in manifest.entries:
            if not same_root:
                entry = _rebase(entry, manifest.root, path.parent)
            record = entry.to_record(manifest.split)
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def _rebase(entry: ManifestEntry, old: pathlib.Path, new: pathlib.Path):
    """Express an entry's relative paths against another directory"""

    def rebase(p):
        if p is None or os.path.isabs(p):
            return p
        return pathlib.Path(os.path.relpath(old / p, new)).as_posix()

    return ManifestEntry(
        image_path=rebase(entry.image_path),
        mask_path=rebase(entry.mask_path),
        description=entry.description,
        attributes=dict(entry.attributes),
        fixation_path=rebase(entry.fixation_path),
    )


def _open_raster(path: pathlib.Path) -> Image.Image:
    """Open and decode a raster, converting decoder errors to RasterDecodeException"""
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as err:
        raise RasterDecodeException(f"Cannot decode raster {path}: {err}") from err
    return img


def _read_scalar_raster(path: pathlib.Path) -> np.ndarray:
    """Read a grayscale raster as float64 scaled to [0, 1]"""
    img = _open_raster(path)
    if img.mode in ("1", "P", "LA", "RGB", "RGBA", "CMYK", "YCbCr"):
        img = img.convert("L")
    array = np.asarray(img)
    if array.ndim == 3:
        array = array[..., 0]
    if img.mode == "F":
        return array.astype(np.float64)
    scale = 255.0 if array.dtype == np.uint8 else 65535.0
    return array.astype(np.float64) / scale


def _read_mask_raster(path: pathlib.Path) -> np.ndarray:
    """Read a mask raster as a boolean array.

    Integer masks whose largest value is at most one are label maps and keep
    every nonzero pixel; other integer masks are thresholded at half their
    dtype range, float masks at 0.5.
    """
    img = _open_raster(path)
    if img.mode in ("1", "P", "LA", "RGB", "RGBA", "CMYK", "YCbCr"):
        img = img.convert("L")
    array = np.asarray(img)
    if array.ndim == 3:
        array = array[..., 0]
    if img.mode == "F":
        return array > 0.5
    if array.max(initial=0) <= 1:
        return array > 0
    return array > np.iinfo(array.dtype).max // 2


def _resize(array: np.ndarray, size: int, resample: Image.Resampling) -> np.ndarray:
    """Resize a 2-D float raster to size x size"""
    if array.shape == (size, size):
        return array
    img = Image.fromarray(array.astype(np.float32))
    return np.asarray(img.resize((size, size), resample=resample), dtype=np.float64)


def normalize_fixation(fixation: np.ndarray) -> np.ndarray:
    """Clip at zero and rescale to sum one; an empty map becomes uniform"""
    fixation = np.clip(np.asarray(fixation, dtype=np.float64), 0, None)
    total = fixation.sum()
    if total <= 0:
        return np.full(fixation.shape, 1.0 / fixation.size)
    return fixation / total


def fixation_from_mask(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Fixation surrogate: the mask blurred with a Gaussian of ``sigma`` pixels,
    normalized to sum one. ``sigma=0`` gives the normalized mask.

    :param mask:
        Binary raster
    :param sigma:
        Standard deviation in pixels
    """
    blurred = mask.astype(np.float64)
    if sigma > 0:
        blurred = gaussian_filter(blurred, sigma=sigma, mode="constant")
    return normalize_fixation(blurred)


def load_sample(
    entry: ManifestEntry,
    target_size: int = 336,
    root: PathLike = ".",
    max_words: int = DEFAULT_MAX_WORDS,
    fixation_sigma: float = DEFAULT_FIXATION_SIGMA,
) -> CamouflageSample:
    """Load the rasters of a manifest entry at a square target size.

    The image is resized bilinearly, the mask binarized (0/1 label maps keep
    every nonzero pixel) and resized with nearest neighbour, the fixation bilinearly and renormalized to sum one.
    Entries without a fixation raster receive a blurred-mask surrogate with
    ``fixation_sigma`` given as a fraction of ``target_size``.

    :param entry:
        The manifest record
    :param target_size:
        Output side length in pixels
    :param root:
        Directory relative paths are resolved against
    :param max_words:
        Longer descriptions are truncated with a warning
    :param fixation_sigma:
        Blur of the surrogate fixation, relative to the image side
    """
    root = pathlib.Path(root)
    img = _open_raster(root / entry.image_path).convert("RGB")
    image = np.asarray(
        img.resize((target_size, target_size), resample=Image.Resampling.BILINEAR),
        dtype=np.uint8,
    )

    mask = _resize(
        _read_mask_raster(root / entry.mask_path).astype(np.float64),
        target_size,
        Image.Resampling.NEAREST,
    )
    mask = (mask >= 0.5).astype(np.uint8)
    empty_mask = not mask.any()
    if empty_mask:
        warnings.warn(f"Sample {entry.name} has an empty mask.", UserWarning)

    if entry.fixation_path is not None:
        fixation = _resize(
            _read_scalar_raster(root / entry.fixation_path),
            target_size,
            Image.Resampling.BILINEAR,
        )
        fixation = normalize_fixation(fixation)
    else:
        fixation = fixation_from_mask(mask, fixation_sigma * target_size)

    description = entry.description
    words = split_words(description)
    if len(words) > max_words:
        warnings.warn(
            f"Description of {entry.name} has {len(words)} words; truncated to "
            f"{max_words}.",
            UserWarning,
        )
        description = " ".join(words[:max_words])

    return CamouflageSample(
        name=entry.name,
        image=image,
        gt_mask=mask,
        gt_fixation=fixation,
        description=description,
        attr_gt=renormalize(entry.attribute_vector()),
        empty_mask=empty_mask,
    )


def attribute_statistics(manifest: DatasetManifest) -> pd.DataFrame:
    """Mean, population standard deviation and maximum of every attribute's
    proportion across the manifest.

    :param manifest:
        A non-empty manifest
    """
    if len(manifest) == 0:
        raise DataException("Cannot compute attribute statistics of an empty manifest.")
    frame = pd.DataFrame(manifest.attribute_matrix(), columns=manifest.attribute_names)
    stats = pd.DataFrame(
        {
            "mean": frame.mean(axis=0),
            "std": frame.std(axis=0, ddof=0),
            "max": frame.max(axis=0),
        }
    )
    stats.index.name = "attribute"
    if manifest.taxonomy is not None:
        stats["category"] = [manifest.taxonomy.category_of(a) for a in stats.index]
    return stats


def category_statistics(manifest: DatasetManifest) -> pd.DataFrame:
    """Mean, population standard deviation and maximum of the per-entry category
    sums (SF, COF, IQF).

    :param manifest:
        A non-empty manifest validated against a taxonomy
    """
    if len(manifest) == 0:
        raise DataException("Cannot compute category statistics of an empty manifest.")
    if manifest.taxonomy is None:
        raise DataException("Category statistics need the manifest's taxonomy.")
    sums = manifest.attribute_matrix() @ manifest.taxonomy.category_mask().T.astype(np.float64)
    frame = pd.DataFrame(sums, columns=list(CATEGORIES))
    stats = pd.DataFrame(
        {
            "mean": frame.mean(axis=0),
            "std": frame.std(axis=0, ddof=0),
            "max": frame.max(axis=0),
        }
    )
    stats.index.name = "category"
    return stats


def description_statistics(manifest: DatasetManifest) -> pd.Series:
    """Word-count statistics of the descriptions (mean, population std, min, max)

    :param manifest:
        A non-empty manifest
    """
    if len(manifest) == 0:
        raise DataException("Cannot compute description statistics of an empty manifest.")
    counts = pd.Series([len(split_words(e.description)) for e in manifest])
    return pd.Series(
        {
            "mean": counts.mean(),
            "std": counts.std(ddof=0),
            "min": counts.min(),
            "max": counts.max(),
        }
    )
