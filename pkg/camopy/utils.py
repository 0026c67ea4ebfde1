"""
Utility functions
"""
import hashlib
import json
import math
import random
import re
from typing import Any, Dict, List

import numpy as np
import torch

#: Relative tolerance below which an attribute vector counts as already normalized.
_NORMALIZED_TOL = 1e-12
_WORD_RE = re.compile(r"[a-z0-9']+")


def split_words(text: str) -> List[str]:
    """Lower-case word tokens of a description.

    Example
    --------
    >>> from camopy.utils import split_words
    >>> split_words("A mottled, ellipse-shaped blob.")
    ['a', 'mottled', 'ellipse', 'shaped', 'blob']
    """
    return _WORD_RE.findall(text.lower())


def _is_binary_raster(raster: np.ndarray) -> bool:
    """Check if the values in the provided raster are 0 or 1 only."""
    return len(set(np.unique(raster).tolist()).difference({0, 1})) == 0


def renormalize(values: np.ndarray) -> np.ndarray:
    """Return ``values`` rescaled to sum to one.

    Vectors that already sum to one (within ``1e-12``) are returned unchanged, so
    that renormalizing twice is the identity.

    :param values:
        Nonnegative vector with a positive sum

    Example
    --------
    >>> import numpy as np
    >>> from camopy.utils import renormalize
    >>> renormalize(np.array([1.0, 3.0]))
    array([0.25, 0.75])
    """
    values = np.asarray(values, dtype=np.float64)
    total = math.fsum(values.tolist())
    if abs(total - 1.0) <= _NORMALIZED_TOL:
        return values
    return values / total


def proportional_kernel_size(size: int, reference_kernel: int = 31,
                             reference_size: int = 336) -> int:
    """Scale an odd pooling kernel to an image size.

    :param size:
        Image side length in pixels
    :param reference_kernel:
        Kernel used at ``reference_size``
    :param reference_size:
        Image side length the reference kernel was chosen for

    Example
    --------
    >>> from camopy.utils import proportional_kernel_size
    >>> proportional_kernel_size(336), proportional_kernel_size(64)
    (31, 7)
    """
    kernel = max(3, int(round(reference_kernel * size / reference_size)))
    if kernel % 2 == 0:
        kernel += 1
    return kernel


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a configuration dictionary"""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    """Seed python, numpy and torch and return a torch generator for data loading.

    :param seed:
        The seed
    :param deterministic:
        Ask torch for deterministic kernels
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def round_num(n, round_to):
    """Format a summary number with at least ``round_to`` significant figures
    (2 when None). The integer digits of large numbers are always kept.

    Example
    --------
    >>> from camopy.utils import round_num
    >>> round_num(0.87654, None), round_num(0.87654, 3), round_num(1234.56, None)
    ('0.88', '0.877', '1235')
    """
    return f"{n:.{_format_sig_figs(n, round_to)}g}"


def _format_sig_figs(value, default=None):
    if value == 0:
        return 1
    digits = int(np.log10(np.abs(value))) + 1
    return max(digits, 2 if default is None else default)
