"""
Plotting utility functions.
"""
from typing import Dict, Optional, Sequence, Tuple

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns
from matplotlib.patches import Patch
from PIL import Image

from camopy.data.taxonomy import CATEGORIES, CATEGORY_COLORS, CATEGORY_NAMES, AttributeTaxonomy

LEGEND_FONT_SIZE = 10


def resize_map(values: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinearly resize a 2-D float map to ``shape`` (rows, cols)"""
    values = np.asarray(values, dtype=np.float32)
    if values.shape == tuple(shape):
        return values.astype(np.float64)
    img = Image.fromarray(values).resize((shape[1], shape[0]), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def min_max_scale(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; constant maps become zero"""
    values = np.asarray(values, dtype=np.float64)
    span = values.max() - values.min()
    if span <= 0:
        return np.zeros_like(values)
    return (values - values.min()) / span


def _category_legend(ax: plt.Axes) -> None:
    handles = [Patch(color=CATEGORY_COLORS[c], label=CATEGORY_NAMES[c]) for c in CATEGORIES]
    ax.legend(handles=handles, fontsize=LEGEND_FONT_SIZE)


def plot_attribute_bars(
    proportions: Sequence[float],
    taxonomy: AttributeTaxonomy,
    ax: Optional[plt.Axes] = None,
    title: Optional[str] = None,
):
    """
    Bar chart of one image's attribute contributions, coloured by category.

    :param proportions:
        17 proportions in taxonomy order
    :param taxonomy:
        Attribute names and categories
    :param ax:
        Matplotlib ax object; a new figure is made when omitted
    :param title:
        Axis title
    """
    if ax is None:
        fig, ax = plt.subplots(figsize=(9, 4))
    else:
        fig = ax.figure
    x = np.arange(len(taxonomy))
    ax.bar(x, np.asarray(proportions), color=taxonomy.colors())
    ax.set_xticks(x)
    ax.set_xticklabels(
        [a.replace("_", " ") for a in taxonomy.attributes], rotation=60, ha="right"
    )
    ax.set(ylabel="Contribution", title=title or "Attribute contributions")
    _category_legend(ax)
    fig.tight_layout()
    return fig, ax


def plot_fixation_overlay(
    image: np.ndarray,
    fixation: np.ndarray,
    ax: Optional[plt.Axes] = None,
    alpha: float = 0.5,
    cmap: str = "jet",
):
    """
    An image with a fixation map drawn over it as a heatmap.

    :param image:
        uint8 raster (H, W, 3)
    :param fixation:
        Fixation map at any resolution; upsampled to the image
    :param alpha:
        Opacity of the heatmap
    """
    if ax is None:
        fig, ax = plt.subplots(figsize=(5, 5))
    else:
        fig = ax.figure
    heat = min_max_scale(resize_map(fixation, image.shape[:2]))
    ax.imshow(image)
    ax.imshow(heat, cmap=cmap, alpha=alpha, vmin=0, vmax=1)
    ax.set_axis_off()
    return fig, ax


def plot_attribute_rose(
    stats: pd.DataFrame,
    taxonomy: AttributeTaxonomy,
    ax: Optional[plt.Axes] = None,
    title: Optional[str] = None,
):
    """
    Rose (polar bar) chart of per-attribute mean and maximum contribution.

    :param stats:
        Output of :func:`camopy.data.attribute_statistics`
    :param taxonomy:
        Attribute names and categories
    """
    if ax is None:
        fig = plt.figure(figsize=(7, 7))
        ax = fig.add_subplot(projection="polar")
    else:
        fig = ax.figure
    n = len(taxonomy)
    theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
    width = 2 * np.pi / n * 0.9
    stats = stats.loc[list(taxonomy.attributes)]
    colors = taxonomy.colors()
    ax.bar(theta, stats["max"], width=width, color=colors, alpha=0.3, label="Max")
    ax.bar(theta, stats["mean"], width=width, color=colors, alpha=0.9, label="Mean")
    ax.set_xticks(theta)
    ax.set_xticklabels([a.replace("_", "\n") for a in taxonomy.attributes], fontsize=7)
    ax.set_title(title or "Attribute contribution statistics")
    _category_legend(ax)
    return fig, ax


def plot_attribute_comparison(
    stats_by_dataset: Dict[str, pd.DataFrame],
    taxonomy: AttributeTaxonomy,
    ax: Optional[plt.Axes] = None,
):
    """
    Per-attribute mean contribution of several datasets side by side, with
    population standard deviations as error bars.

    :param stats_by_dataset:
        Dataset label -> :func:`camopy.data.attribute_statistics` output
    :param taxonomy:
        Attribute names and categories
    """
    if ax is None:
        fig, ax = plt.subplots(figsize=(11, 4.5))
    else:
        fig = ax.figure
    n_sets = len(stats_by_dataset)
    x = np.arange(len(taxonomy))
    width = 0.8 / max(n_sets, 1)
    palette = sns.color_palette(n_colors=n_sets)
    for i, (label, stats) in enumerate(stats_by_dataset.items()):
        stats = stats.loc[list(taxonomy.attributes)]
        ax.bar(
            x + (i - (n_sets - 1) / 2) * width,
            stats["mean"],
            width=width,
            yerr=stats["std"],
            capsize=2,
            color=palette[i],
            label=label,
        )
    ax.set_xticks(x)
    ax.set_xticklabels(
        [a.replace("_", " ") for a in taxonomy.attributes], rotation=60, ha="right"
    )
    for tick, color in zip(ax.get_xticklabels(), taxonomy.colors()):
        tick.set_color(color)
    ax.set(ylabel="Mean contribution", title="Attribute contributions by dataset")
    ax.legend(fontsize=LEGEND_FONT_SIZE)
    fig.tight_layout()
    return fig, ax


def plot_score_distributions(scores: pd.DataFrame, metrics: Sequence[str]):
    """Histograms of per-image evaluation scores, one panel per measure"""
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5))
    axes = np.atleast_1d(axes)
    for ax, metric in zip(axes, metrics):
        sns.histplot(scores[metric], ax=ax, bins=20, color="C0")
        ax.axvline(scores[metric].mean(), color="k", ls="--")
        ax.set(title=metric, xlabel="")
    fig.tight_layout()
    return fig, axes


def plot_training_curves(history: pd.DataFrame):
    """Per-step loss terms and learning rate of a training run"""
    fig, ax = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    for term in ("total", "mask", "fix", "attr", "consist"):
        ax[0].plot(history["step"], history[term], label=term)
    ax[0].set(ylabel="Loss", title="Training loss")
    ax[0].legend(fontsize=LEGEND_FONT_SIZE)
    ax[1].plot(history["step"], history["lr"], color="k")
    ax[1].set(xlabel="Step", ylabel="Learning rate")
    return fig, ax
