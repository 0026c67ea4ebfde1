"""
Experiment routines wrapping a :class:`~camopy.models.CamouflageSegmenter`.

- ExperimentalDesign base class
- Training
- Evaluation
- Single image inference
- Dataset and score report

"""
import json
import logging
import pathlib
import warnings
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Union

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from PIL import Image

from camopy.checkpoint import save_checkpoint
from camopy.config import TrainConfig
from camopy.custom_exceptions import DataException, NonFiniteException
from camopy.data import load_taxonomy
from camopy.data.manifest import (
    DatasetManifest,
    _open_raster,
    attribute_statistics,
    category_statistics,
    description_statistics,
)
from camopy.data.taxonomy import AttributeTaxonomy, category_contributions
from camopy.metrics import METRIC_NAMES, EvalReport, evaluate_dataset
from camopy.models import CamouflageDataset, CamouflageSegmenter
from camopy.plot_utils import (
    min_max_scale,
    plot_attribute_bars,
    plot_attribute_comparison,
    plot_attribute_rose,
    plot_fixation_overlay,
    plot_score_distributions,
    plot_training_curves,
    resize_map,
)
from camopy.utils import round_num, seed_everything

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]


class ExperimentalDesign:
    """
    Base class for other experiment types

    See subclasses for examples of most methods
    """

    model = None
    expt_type = None

    def __init__(self, model=None, **kwargs):
        if model is not None:
            self.model = model
        if self.model is None:
            raise ValueError("model not set or passed.")

    @property
    def config(self) -> TrainConfig:
        """The configuration of the wrapped model"""
        return self.model.config


def _save_png(values: np.ndarray, path: pathlib.Path) -> pathlib.Path:
    """Write a [0, 1] float map as an 8-bit greyscale PNG"""
    pixels = np.rint(np.clip(values, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)
    return path


def _attribute_record(
    name: str, proportions: np.ndarray, taxonomy: AttributeTaxonomy
) -> Dict[str, Any]:
    return {
        "name": name,
        "attributes": {a: float(p) for a, p in zip(taxonomy.attributes, proportions)},
        "categories": category_contributions(proportions, taxonomy),
    }


class TrainingExperiment(ExperimentalDesign):
    """
    Seeds everything, trains a segmenter on a manifest and writes the run
    directory: ``config.yaml``, ``train_log.jsonl``, intermediate
    ``checkpoints/epoch_XXXX.pt`` every ``config.checkpoint_every`` epochs and
    the final ``checkpoint.pt``.

    :param manifest:
        A non-empty training manifest
    :param config:
        Training settings
    :param out_dir:
        Run directory
    :param model:
        Optional prebuilt model; built from ``config`` after seeding otherwise
    :param feature_source:
        Precomputed features replacing the visual backbone

    Example
    --------
    >>> import tempfile
    >>> from camopy.config import load_config
    >>> from camopy.data import synth_generate
    >>> from camopy.experiments import TrainingExperiment
    >>> tmp = tempfile.mkdtemp()
    >>> manifest = synth_generate(4, seed=1, out_dir=f"{tmp}/data", canvas=64)
    >>> config = load_config("toy").replace(max_steps=2, batch_size=2)
    >>> result = TrainingExperiment(manifest, config, out_dir=f"{tmp}/run")
    >>> len(result.history), result.checkpoint_path.name
    (2, 'checkpoint.pt')
    """

    expt_type = "Training"

    def __init__(
        self,
        manifest: DatasetManifest,
        config: TrainConfig,
        out_dir: PathLike,
        model: Optional[CamouflageSegmenter] = None,
        feature_source=None,
    ):
        if len(manifest) == 0:
            raise DataException("Cannot train on an empty manifest.")
        self.manifest = manifest
        self.out_dir = pathlib.Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        generator = seed_everything(config.seed, config.deterministic)
        if model is None:
            model = CamouflageSegmenter(config, feature_source=feature_source)
        super().__init__(model=model)

        config.to_yaml(self.out_dir / "config.yaml")
        self.log_path = self.out_dir / "train_log.jsonl"
        self.log_path.write_text("", encoding="utf-8")
        self.dataset = CamouflageDataset(manifest, config)
        logger.info(
            "Training on %d samples, config %s", len(self.dataset), config.hash()[:12]
        )

        self.last_checkpoint: Optional[pathlib.Path] = None
        try:
            records = self.model.fit(
                self.dataset,
                generator=generator,
                log_path=self.log_path,
                on_epoch_end=self._on_epoch_end,
            )
        except NonFiniteException:
            if self.last_checkpoint is not None:
                logger.error("Last good checkpoint: %s", self.last_checkpoint)
            raise
        self.history = pd.DataFrame(records)
        self.final_metrics = self._epoch_means(records[-1]["epoch"]) if records else {}
        self.checkpoint_path = save_checkpoint(
            self.out_dir / "checkpoint.pt",
            self.model,
            self.model.optimizer,
            epoch=int(self.history["epoch"].iloc[-1]) if records else 0,
            step=len(records),
            metrics=self.final_metrics,
        )
        logger.info("Wrote %s", self.checkpoint_path)

    def _epoch_means(self, epoch: int, records: Optional[List[dict]] = None) -> Dict[str, float]:
        if records is None:
            records = [r for r in self.history.to_dict("records") if r["epoch"] == epoch]
        return {
            k: float(np.mean([r[k] for r in records]))
            for k in ("mask", "fix", "attr", "consist", "total")
        }

    def _on_epoch_end(self, epoch, step, optimizer, epoch_records) -> None:
        every = self.config.checkpoint_every
        if every and epoch % every == 0 and epoch_records:
            self.last_checkpoint = save_checkpoint(
                self.out_dir / "checkpoints" / f"epoch_{epoch:04d}.pt",
                self.model,
                optimizer,
                epoch=epoch,
                step=step,
                metrics=self._epoch_means(epoch, epoch_records),
            )

    def summary(self, round_to=None) -> None:
        """Print a text summary of the run

        :param round_to:
            Number of significant figures of the printed numbers. Defaults to 2.
        """
        print(f"{self.expt_type:=^80}")
        print(f"Config hash: {self.config.hash()[:12]}")
        print(f"Samples: {len(self.dataset)}")
        print(f"Steps: {len(self.history)}")
        print("Final epoch mean losses:")
        for term, value in self.final_metrics.items():
            print(f"{term: <10}{round_num(value, round_to)}")

    def plot(self):
        """Plot the loss terms and the learning rate against the step"""
        return plot_training_curves(self.history)


class EvaluationExperiment(ExperimentalDesign):
    """
    Predicts every manifest record with the visual branch only and scores the
    masks against the ground truth. Records whose mask file is missing are
    skipped with a warning and counted.

    Writes ``scores.jsonl``, ``attributes.jsonl``, ``summary.json`` and the
    predicted ``masks/`` and ``fixations/`` PNGs into ``out_dir``.

    :param manifest:
        The manifest to evaluate
    :param model:
        A trained segmenter, or any object with a ``config`` and a
        compatible ``predict`` method
    :param out_dir:
        Output directory; nothing is written when omitted
    :param batch_size:
        Images per forward pass
    :param max_workers:
        Threads used to compute the measures
    :param taxonomy:
        Attribute names for the attribute records
    """

    expt_type = "Evaluation"

    def __init__(
        self,
        manifest: DatasetManifest,
        model=None,
        out_dir: Optional[PathLike] = None,
        batch_size: int = 8,
        max_workers: Optional[int] = None,
        taxonomy: Optional[AttributeTaxonomy] = None,
        progressbar: bool = False,
    ):
        super().__init__(model=model)
        if len(manifest) == 0:
            raise DataException("Cannot evaluate an empty manifest.")
        self.manifest = manifest
        self.taxonomy = taxonomy or manifest.taxonomy or load_taxonomy()
        self.out_dir = pathlib.Path(out_dir) if out_dir is not None else None
        size = self.config.image_size

        pairs, images = [], {}
        self.predictions: Dict[str, Dict[str, Optional[np.ndarray]]] = {}
        pending = []
        for index, entry in enumerate(manifest):
            if not manifest.resolve(entry.mask_path).exists():
                pairs.append((entry.name, None, None))
                continue
            pending.append(index)
        for start in range(0, len(pending), batch_size):
            chunk = [
                manifest.sample(i, size, fixation_sigma=self.config.fixation_sigma)
                for i in pending[start : start + batch_size]
            ]
            pred = self.model.predict(
                np.stack([s.image for s in chunk]), names=[s.name for s in chunk]
            )
            for i, s in enumerate(chunk):
                self.predictions[s.name] = {
                    "mask": pred.mask[i],
                    "fixation": pred.fixation[i] if pred.fixation is not None else None,
                    "attributes": pred.attributes[i] if pred.attributes is not None else None,
                }
                pairs.append((s.name, pred.mask[i], s.gt_mask))
                entry = manifest[pending[start + i]]
                images[s.name] = str(manifest.resolve(entry.image_path).resolve())

        self.report = evaluate_dataset(pairs, max_workers=max_workers, progressbar=progressbar)
        self.report.scores["image"] = [images[n] for n in self.report.scores.index]
        logger.info(
            "Evaluated %d images (%d skipped)", len(self.report.scores), self.report.skipped
        )
        if self.out_dir is not None:
            self._write(size)

    @property
    def scores(self) -> pd.DataFrame:
        return self.report.scores

    def _write(self, size: int) -> None:
        out = self.out_dir
        self.report.write(out)
        (out / "masks").mkdir(exist_ok=True)
        (out / "fixations").mkdir(exist_ok=True)
        with open(out / "attributes.jsonl", "w", encoding="utf-8") as f:
            for name, pred in self.predictions.items():
                _save_png(pred["mask"], out / "masks" / f"{name}.png")
                if pred["fixation"] is not None:
                    heat = min_max_scale(resize_map(pred["fixation"], (size, size)))
                    _save_png(heat, out / "fixations" / f"{name}.png")
                if pred["attributes"] is not None:
                    record = _attribute_record(name, pred["attributes"], self.taxonomy)
                    f.write(json.dumps(record) + "\n")

    def summary(self, round_to=None) -> None:
        """Print the dataset means of the four measures

        :param round_to:
            Number of significant figures of the printed numbers. Defaults to 2.
        """
        print(f"{self.expt_type:=^80}")
        print(f"Images: {len(self.scores)} (skipped {self.report.skipped})")
        for metric, value in self.report.means.items():
            print(f"{metric: <10}{round_num(value, round_to)}")

    def plot(self):
        """Histograms of the per-image measures"""
        return plot_score_distributions(self.scores, METRIC_NAMES)


@dataclass
class InferenceResult:
    """Files written by :func:`infer_image` and the attribute record"""

    mask_path: pathlib.Path
    fixation_path: Optional[pathlib.Path]
    overlay_path: Optional[pathlib.Path]
    attributes_path: Optional[pathlib.Path]
    attributes: Optional[Dict[str, Any]]


def infer_image(
    model: CamouflageSegmenter,
    image_path: PathLike,
    out_dir: PathLike,
    taxonomy: Optional[AttributeTaxonomy] = None,
) -> InferenceResult:
    """
    Segment one image with the visual branch only.

    Writes ``<stem>_mask.png`` (probabilities at the original resolution),
    ``<stem>_fixation.png`` (min-max scaled, upsampled), ``<stem>_overlay.png``
    and ``<stem>_attributes.json`` (17 proportions and category sums) into
    ``out_dir``. Disabled components produce no file.

    :param model:
        A trained segmenter
    :param image_path:
        Any raster Pillow can decode
    :param out_dir:
        Output directory, created if needed
    :param taxonomy:
        Attribute names for the record; the bundled taxonomy by default
    """
    image_path = pathlib.Path(image_path)
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    taxonomy = taxonomy or load_taxonomy()
    size = model.config.image_size

    original = np.asarray(_open_raster(image_path).convert("RGB"), dtype=np.uint8)
    h, w = original.shape[:2]
    resized = np.asarray(
        Image.fromarray(original).resize((size, size), Image.Resampling.BILINEAR),
        dtype=np.uint8,
    )
    pred = model.predict(resized[None], names=[image_path.stem])
    stem = image_path.stem

    mask_path = _save_png(resize_map(pred.mask[0], (h, w)), out_dir / f"{stem}_mask.png")
    fixation_path = overlay_path = attributes_path = record = None
    if pred.fixation is not None:
        heat = min_max_scale(resize_map(pred.fixation[0], (h, w)))
        fixation_path = _save_png(heat, out_dir / f"{stem}_fixation.png")
        fig, _ = plot_fixation_overlay(original, pred.fixation[0])
        overlay_path = out_dir / f"{stem}_overlay.png"
        fig.savefig(overlay_path, bbox_inches="tight", metadata={"Software": None})
        plt.close(fig)
    if pred.attributes is not None:
        record = _attribute_record(stem, pred.attributes[0], taxonomy)
        attributes_path = out_dir / f"{stem}_attributes.json"
        with open(attributes_path, "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2)
    logger.info("Wrote inference outputs for %s to %s", stem, out_dir)
    return InferenceResult(mask_path, fixation_path, overlay_path, attributes_path, record)


class ReportExperiment:
    """
    Dataset statistics and evaluation figures.

    For every manifest: attribute, category and description statistics and an
    attribute rose chart; across manifests: a side-by-side comparison of mean
    contributions. For an evaluation directory: score histograms, and per-image
    attribute bars and fixation overlays for the first ``max_images`` records.

    :param manifests:
        Dataset label -> manifest
    :param scores_dir:
        Output directory of an evaluation run
    :param out_dir:
        Report directory
    :param taxonomy:
        Attribute names and categories
    :param max_images:
        Per-image figures to draw
    """

    expt_type = "Report"

    def __init__(
        self,
        manifests: Optional[Dict[str, DatasetManifest]] = None,
        scores_dir: Optional[PathLike] = None,
        out_dir: Optional[PathLike] = None,
        taxonomy: Optional[AttributeTaxonomy] = None,
        max_images: int = 8,
    ):
        manifests = dict(manifests or {})
        if not manifests and scores_dir is None:
            raise DataException("A report needs at least one manifest or a scores directory.")
        self.taxonomy = taxonomy or load_taxonomy()
        self.out_dir = pathlib.Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        self.attribute_stats = {k: attribute_statistics(m) for k, m in manifests.items()}
        self.category_stats = {
            k: category_statistics(m) for k, m in manifests.items() if m.taxonomy is not None
        }
        self.description_stats = {k: description_statistics(m) for k, m in manifests.items()}
        self.eval_report = EvalReport.read(scores_dir) if scores_dir is not None else None
        self.scores_dir = pathlib.Path(scores_dir) if scores_dir is not None else None
        self.figures: List[pathlib.Path] = []
        if self.out_dir is not None:
            self._write_tables()
            self._write_figures(max_images)

    def _write_tables(self) -> None:
        out = self.out_dir
        if self.attribute_stats:
            pd.concat(self.attribute_stats, names=["dataset"]).to_csv(out / "attribute_stats.csv")
            pd.DataFrame(self.description_stats).T.rename_axis("dataset").to_csv(
                out / "description_stats.csv"
            )
        if self.category_stats:
            pd.concat(self.category_stats, names=["dataset"]).to_csv(out / "category_stats.csv")
        if self.eval_report is not None:
            with open(out / "summary.json", "w", encoding="utf-8") as f:
                json.dump(self.eval_report.summary(), f, indent=2)

    def _save(self, fig, name: str) -> None:
        path = self.out_dir / name
        fig.savefig(path, bbox_inches="tight")
        plt.close(fig)
        self.figures.append(path)

    def _write_figures(self, max_images: int) -> None:
        if self.attribute_stats:
            fig, _ = plot_attribute_comparison(self.attribute_stats, self.taxonomy)
            self._save(fig, "attribute_comparison.png")
            for label, stats in self.attribute_stats.items():
                fig, _ = plot_attribute_rose(stats, self.taxonomy, title=label)
                self._save(fig, f"attribute_rose_{label}.png")
        if self.eval_report is None:
            return
        fig, _ = plot_score_distributions(self.eval_report.scores, METRIC_NAMES)
        self._save(fig, "score_distributions.png")
        for record in self._attribute_records()[:max_images]:
            proportions = [record["attributes"][a] for a in self.taxonomy.attributes]
            fig, _ = plot_attribute_bars(proportions, self.taxonomy, title=record["name"])
            self._save(fig, f"attributes_{record['name']}.png")
        drawn = 0
        for name, row in self.eval_report.scores.iterrows():
            if drawn >= max_images:
                break
            heat = self.scores_dir / "fixations" / f"{name}.png"
            image = pathlib.Path(str(row.get("image", "")))
            if not heat.exists() or not image.is_file():
                continue
            fixation = np.asarray(Image.open(heat), dtype=np.float64) / 255
            fig, _ = plot_fixation_overlay(
                np.asarray(Image.open(image).convert("RGB")), fixation
            )
            self._save(fig, f"fixation_{name}.png")
            drawn += 1

    def _attribute_records(self) -> List[dict]:
        path = self.scores_dir / "attributes.jsonl"
        if not path.exists():
            warnings.warn(f"No attribute records in {self.scores_dir}.", UserWarning)
            return []
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def summary(self, round_to=None) -> None:
        """Print the statistics tables"""
        print(f"{self.expt_type:=^80}")
        for label, stats in self.description_stats.items():
            words = ", ".join(f"{k} {round_num(v, round_to)}" for k, v in stats.items())
            print(f"{label}: description words {words}")
            if label in self.category_stats:
                for category, row in self.category_stats[label].iterrows():
                    print(
                        f"  {category: <5}mean {round_num(row['mean'], round_to)}, "
                        f"std {round_num(row['std'], round_to)}"
                    )
        if self.eval_report is not None:
            for metric, value in self.eval_report.means.items():
                print(f"{metric: <10}{round_num(value, round_to)}")
