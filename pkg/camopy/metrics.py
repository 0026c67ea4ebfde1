"""
Evaluation measures for camouflaged object segmentation: mean absolute error,
structure-measure, mean enhanced-alignment measure and weighted F-measure.

Predictions are real rasters in [0, 1]; ground truths are binary rasters of the
same shape.
"""
import json
import logging
import math
import pathlib
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.ndimage import convolve
from scipy.ndimage import distance_transform_edt as bwdist
from tqdm.auto import tqdm

from camopy.custom_exceptions import DataException, ShapeMismatchException

logger = logging.getLogger(__name__)

_EPS = np.spacing(1)
#: Quantization levels of the enhanced-alignment sweep.
E_LEVELS = 256
METRIC_NAMES = ("S_alpha", "E_phi", "F_beta_w", "MAE")


def _prepare(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeMismatchException(
            f"Prediction {pred.shape} and ground truth {gt.shape} must be equal 2-D shapes."
        )
    return np.clip(pred, 0, 1), gt > 0.5


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute error

    Example
    --------
    >>> import numpy as np
    >>> from camopy.metrics import mae
    >>> gt = np.array([[0, 1], [1, 0]])
    >>> mae(gt.astype(float), gt), mae(1.0 - gt, gt)
    (0.0, 1.0)
    """
    pred, gt = _prepare(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    values = pred[gt]
    x = np.mean(values)
    sigma_x = np.std(values, ddof=1) if values.size > 1 else 0.0
    return 2 * x / (x**2 + 1 + sigma_x + _EPS)


def _object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = pred * gt
    bg = (1 - pred) * ~gt
    u = np.mean(gt)
    return u * _s_object(fg, gt) + (1 - u) * _s_object(bg, ~gt)


def _centroid(gt: np.ndarray) -> Tuple[int, int]:
    h, w = gt.shape
    area = gt.sum()
    if area == 0:
        x, y = np.round(w / 2), np.round(h / 2)
    else:
        x = np.round(np.sum(gt.sum(axis=0) * np.arange(w)) / area)
        y = np.round(np.sum(gt.sum(axis=1) * np.arange(h)) / area)
    return int(x) + 1, int(y) + 1


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = np.mean(pred), np.mean(gt)
    dof = max(n - 1, 1)
    sigma_x = np.sum((pred - x) ** 2) / dof
    sigma_y = np.sum((gt - y) ** 2) / dof
    sigma_xy = np.sum((pred - x) * (gt - y)) / dof
    alpha = 4 * x * y * sigma_xy
    beta = (x**2 + y**2) * (sigma_x + sigma_y)
    if alpha != 0:
        return alpha / (beta + _EPS)
    if beta == 0:
        return 1.0
    return 0.0


def _region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    x, y = min(x, w), min(y, h)
    gt = gt.astype(np.float64)
    w1 = x * y / (h * w)
    w2 = y * (w - x) / (h * w)
    w3 = (h - y) * x / (h * w)
    w4 = 1 - w1 - w2 - w3
    parts = (
        (w1, pred[:y, :x], gt[:y, :x]),
        (w2, pred[:y, x:], gt[:y, x:]),
        (w3, pred[y:, :x], gt[y:, :x]),
        (w4, pred[y:, x:], gt[y:, x:]),
    )
    return sum(weight * _ssim(p, g) for weight, p, g in parts if p.size)


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure-measure: ``alpha`` times object-aware plus ``1 - alpha`` times
    region-aware structural similarity.

    An all-background ground truth scores ``1 - mean(pred)``; an all-foreground
    one scores ``mean(pred)``.

    :param pred:
        Prediction in [0, 1]
    :param gt:
        Binary ground truth
    :param alpha:
        Object/region trade-off
    """
    pred, gt = _prepare(pred, gt)
    y = np.mean(gt)
    if y == 0:
        return float(1 - np.mean(pred))
    if y == 1:
        return float(np.mean(pred))
    score = alpha * _object(pred, gt) + (1 - alpha) * _region(pred, gt)
    return float(max(score, 0.0))


def _enhanced_sums(
    fg_fg: np.ndarray, fg_bg: np.ndarray, gt_fg: int, size: int
) -> np.ndarray:
    """Sum of the enhanced-alignment matrix for binarizations with ``fg_fg`` true
    positives and ``fg_bg`` false positives."""
    pred_fg = fg_fg + fg_bg
    pred_bg = size - pred_fg
    if gt_fg == 0:
        return pred_bg.astype(np.float64)
    if gt_fg == size:
        return pred_fg.astype(np.float64)
    bg_fg = gt_fg - fg_fg
    bg_bg = pred_bg - bg_fg
    mean_pred = pred_fg / size
    mean_gt = gt_fg / size
    parts = (
        (fg_fg, 1 - mean_pred, 1 - mean_gt),
        (fg_bg, 1 - mean_pred, -mean_gt),
        (bg_fg, -mean_pred, 1 - mean_gt),
        (bg_bg, -mean_pred, -mean_gt),
    )
    total = np.zeros(np.shape(fg_fg), dtype=np.float64)
    for count, a, b in parts:
        align = 2 * a * b / (a**2 + b**2 + _EPS)
        total = total + (align + 1) ** 2 / 4 * count
    return total


def e_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean enhanced-alignment measure.

    The prediction is quantized to 8 bits and binarized at every level
    ``q >= t``, ``t = 255..0``. Each enhanced-alignment sum is divided by
    ``N - 1`` and the 256 values are averaged. The ``t = 0`` binarization marks
    every pixel foreground, so a perfect prediction scores slightly below one.

    :param pred:
        Prediction in [0, 1]
    :param gt:
        Binary ground truth
    """
    pred, gt = _prepare(pred, gt)
    size = gt.size
    q = (pred * 255).astype(np.uint8)
    fg_hist = np.bincount(q[gt], minlength=E_LEVELS)
    bg_hist = np.bincount(q[~gt], minlength=E_LEVELS)
    # index j counts the pixels with q >= 255 - j
    fg_fg = np.cumsum(fg_hist[::-1])
    fg_bg = np.cumsum(bg_hist[::-1])
    sums = _enhanced_sums(fg_fg, fg_bg, int(gt.sum()), size)
    return float(np.mean(sums / (size - 1 + _EPS)))


def matlab_style_gauss2d(shape: Tuple[int, int] = (7, 7), sigma: float = 5) -> np.ndarray:
    """Normalized 2-D Gaussian kernel matching MATLAB's ``fspecial('gaussian')``"""
    m, n = [(s - 1) / 2 for s in shape]
    y, x = np.ogrid[-m : m + 1, -n : n + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    total = h.sum()
    if total != 0:
        h /= total
    return h


def f_beta_w(pred: np.ndarray, gt: np.ndarray, beta: float = 1.0) -> float:
    """Weighted F-measure with boundary-dependent error weighting.

    An all-background ground truth scores 0.

    :param pred:
        Prediction in [0, 1]
    :param gt:
        Binary ground truth
    :param beta:
        Recall/precision trade-off (``beta**2`` in the usual notation)
    """
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        return 0.0
    dist, idx = bwdist(~gt, return_indices=True)
    error = np.abs(pred - gt)
    error_t = np.copy(error)
    error_t[~gt] = error_t[idx[0][~gt], idx[1][~gt]]
    kernel = matlab_style_gauss2d((7, 7), sigma=5)
    error_a = convolve(error_t, weights=kernel, mode="constant", cval=0)
    min_error = np.where(gt & (error_a < error), error_a, error)
    importance = np.where(~gt, 2 - np.exp(np.log(0.5) / 5 * dist), 1.0)
    weighted = min_error * importance
    tp = np.sum(gt) - np.sum(weighted[gt])
    fp = np.sum(weighted[~gt])
    recall = 1 - np.mean(weighted[gt])
    precision = tp / (tp + fp + _EPS)
    score = (1 + beta) * recall * precision / (recall + beta * precision + _EPS)
    return float(score)


def evaluate_pair(pred: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    """All four measures of one prediction"""
    return {
        "S_alpha": s_measure(pred, gt),
        "E_phi": e_measure(pred, gt),
        "F_beta_w": f_beta_w(pred, gt),
        "MAE": mae(pred, gt),
    }


@dataclass
class EvalReport:
    """
    Per-image scores and their dataset means.

    :param scores:
        One row per image, indexed by name, with the four measure columns and
        any extra columns (e.g. ``image``)
    :param skipped:
        Records left out for missing ground truth
    """

    scores: pd.DataFrame
    skipped: int = 0

    @property
    def means(self) -> pd.Series:
        """Dataset means, summed exactly so that image order does not matter"""
        return pd.Series(
            {
                m: math.fsum(self.scores[m].tolist()) / len(self.scores)
                if len(self.scores)
                else float("nan")
                for m in METRIC_NAMES
            }
        )

    def summary(self) -> dict:
        return {
            **{m: float(v) for m, v in self.means.items()},
            "count": int(len(self.scores)),
            "skipped": int(self.skipped),
        }

    def write(self, out_dir: Union[str, pathlib.Path]) -> pathlib.Path:
        """Write ``scores.jsonl`` and ``summary.json`` into ``out_dir``"""
        out_dir = pathlib.Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "scores.jsonl", "w", encoding="utf-8") as f:
            for name, row in self.scores.iterrows():
                record = {"name": name}
                record.update({k: (v.item() if hasattr(v, "item") else v) for k, v in row.items()})
                f.write(json.dumps(record) + "\n")
        with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
            json.dump(self.summary(), f, indent=2)
        return out_dir

    @classmethod
    def read(cls, directory: Union[str, pathlib.Path]) -> "EvalReport":
        """Read a report written by :meth:`write`"""
        directory = pathlib.Path(directory)
        with open(directory / "scores.jsonl", encoding="utf-8") as f:
            scores = pd.DataFrame([json.loads(line) for line in f if line.strip()])
        if scores.empty:
            raise DataException(f"No scores found in {directory}.")
        skipped = 0
        if (directory / "summary.json").exists():
            with open(directory / "summary.json", encoding="utf-8") as f:
                skipped = json.load(f).get("skipped", 0)
        return cls(scores.set_index("name"), skipped)


def evaluate_dataset(
    pairs: Iterable[Tuple[str, Optional[np.ndarray], Optional[np.ndarray]]],
    max_workers: Optional[int] = None,
    progressbar: bool = False,
) -> EvalReport:
    """Score ``(name, pred, gt)`` triples; triples without a ground truth are
    skipped with a warning.

    :param pairs:
        Predictions and ground truths
    :param max_workers:
        Score images on a thread pool of this size
    :param progressbar:
        Show a progress bar
    """
    valid, skipped = [], 0
    for name, pred, gt in pairs:
        if gt is None or pred is None:
            warnings.warn(f"Skipping {name}: missing ground truth.", UserWarning)
            skipped += 1
            continue
        valid.append((name, pred, gt))
    if not valid:
        raise DataException("Nothing to evaluate: no record has a ground truth.")

    def score(item):
        name, pred, gt = item
        return {"name": name, **evaluate_pair(pred, gt)}

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(tqdm(pool.map(score, valid), total=len(valid), disable=not progressbar))
    else:
        rows = [score(item) for item in tqdm(valid, disable=not progressbar)]
    if skipped:
        logger.info("Skipped %d records without ground truth", skipped)
    return EvalReport(pd.DataFrame(rows).set_index("name"), skipped)
