"""
The camouflage-attribute taxonomy: 17 attributes grouped into Surrounding
Factors (SF), Camouflaged Object-Self Factors (COF) and Imaging Quality Factors
(IQF).
"""
import pathlib
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Tuple, Union

import numpy as np
import yaml

from camopy.custom_exceptions import ConfigException

N_ATTRIBUTES = 17
CATEGORIES = ("SF", "COF", "IQF")
CATEGORY_NAMES = {
    "SF": "Surrounding Factors",
    "COF": "Camouflaged Object-Self Factors",
    "IQF": "Imaging Quality Factors",
}
#: Bar colours used by every attribute plot.
CATEGORY_COLORS = {"SF": "tab:blue", "COF": "tab:green", "IQF": "tab:red"}

#: Attributes every default taxonomy must name.
REQUIRED_ATTRIBUTES = (
    "environmental_pattern_matching",
    "color_matching",
    "environmental_shading",
    "environmental_textures",
    "shape_mimicry",
    "low_resolution",
)


@dataclass(frozen=True)
class AttributeTaxonomy:
    """
    Ordered list of camouflage attributes and the category each belongs to.

    :param attributes:
        Ordered attribute identifiers, exactly 17 and unique
    :param categories:
        Mapping of every attribute to one of ``SF``, ``COF``, ``IQF``

    Example
    --------
    >>> from camopy.data import load_taxonomy
    >>> taxonomy = load_taxonomy()
    >>> len(taxonomy), taxonomy.attributes[0]
    (17, 'environmental_pattern_matching')
    >>> taxonomy.category_of("low_resolution")
    'IQF'
    """

    attributes: Tuple[str, ...]
    categories: Mapping[str, str] = field(hash=False)

    def __post_init__(self):
        attributes = tuple(self.attributes)
        object.__setattr__(self, "attributes", attributes)
        object.__setattr__(self, "categories", dict(self.categories))
        if len(attributes) != N_ATTRIBUTES:
            raise ConfigException(
                f"A taxonomy needs exactly {N_ATTRIBUTES} attributes, got "
                f"{len(attributes)}."
            )
        if len(set(attributes)) != len(attributes):
            duplicated = sorted({a for a in attributes if attributes.count(a) > 1})
            raise ConfigException(f"Duplicated attribute identifiers: {duplicated}")
        if set(self.categories) != set(attributes):
            missing = sorted(set(attributes) - set(self.categories))
            extra = sorted(set(self.categories) - set(attributes))
            raise ConfigException(
                f"Categories must cover exactly the attributes; missing {missing}, "
                f"unexpected {extra}."
            )
        for name, category in self.categories.items():
            if category not in CATEGORIES:
                raise ConfigException(
                    f"Attribute {name!r} has category {category!r}; expected one "
                    f"of {CATEGORIES}."
                )

    def __len__(self) -> int:
        return len(self.attributes)

    def index(self, name: str) -> int:
        """Position of ``name`` in contribution vectors"""
        return self.attributes.index(name)

    def category_of(self, name: str) -> str:
        """Category code of an attribute"""
        return self.categories[name]

    def members(self, category: str) -> List[str]:
        """Attributes of one category, in taxonomy order"""
        return [a for a in self.attributes if self.categories[a] == category]

    def category_mask(self) -> np.ndarray:
        """Boolean matrix of shape (3, 17) marking category membership"""
        return np.array(
            [[self.categories[a] == c for a in self.attributes] for c in CATEGORIES]
        )

    def colors(self) -> List[str]:
        """Per-attribute bar colours following the category convention"""
        return [CATEGORY_COLORS[self.categories[a]] for a in self.attributes]

    def to_dict(self) -> Dict[str, str]:
        """Ordered attribute -> category mapping"""
        return {a: self.categories[a] for a in self.attributes}

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "AttributeTaxonomy":
        """Build a taxonomy from an ordered attribute -> category mapping"""
        return cls(attributes=tuple(mapping), categories=dict(mapping))

    @classmethod
    def from_yaml(cls, path: Union[str, pathlib.Path]) -> "AttributeTaxonomy":
        """Read a key-value taxonomy file (attribute: category per line)"""
        with open(path, encoding="utf-8") as f:
            mapping = yaml.safe_load(f)
        if not isinstance(mapping, dict):
            raise ConfigException(f"Taxonomy file {path} is not a key-value mapping.")
        return cls.from_mapping(mapping)

    def to_yaml(self, path: Union[str, pathlib.Path]) -> None:
        """Write the taxonomy in the same key-value layout it is read from"""
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)


def category_contributions(
    proportions: np.ndarray, taxonomy: AttributeTaxonomy
) -> Dict[str, float]:
    """Sum attribute proportions per category.

    :param proportions:
        A 17-vector of proportions in taxonomy order

    Example
    --------
    >>> import numpy as np
    >>> from camopy.data import load_taxonomy
    >>> from camopy.data.taxonomy import category_contributions
    >>> shares = category_contributions(np.full(17, 1 / 17), load_taxonomy())
    >>> round(sum(shares.values()), 6)
    1.0
    """
    proportions = np.asarray(proportions, dtype=np.float64)
    mask = taxonomy.category_mask()
    return {c: float(proportions[mask[i]].sum()) for i, c in enumerate(CATEGORIES)}
