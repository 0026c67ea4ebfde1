"""
The camouflaged-object segmenter: encoders, fixation decoder, attribute head,
AFE fusion, mask decoder and projectors composed into one module, with a
scikit-learn like ``fit`` / ``predict`` / ``score`` API.

Models are intended to be used from inside an experiment class (see
:doc:`experiments</api_experiments>`), which seeds, builds and checkpoints them.
"""
import json
import logging
import pathlib
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset
from tqdm.auto import tqdm

from camopy.afe import AFEFusion, FusedFeature
from camopy.attributes import AttributeHead, AttributeScores, attribute_loss
from camopy.config import TrainConfig
from camopy.custom_exceptions import DataException, NonFiniteException
from camopy.data.manifest import DatasetManifest
from camopy.encoders import (
    MultiLevelFeatures,
    PrecomputedFeatures,
    ToyTextEncoder,
    ToyVisualBackbone,
    images_to_tensor,
)
from camopy.fixation import FixationDecoder, FixationMap, fixation_loss, fixation_to_grid
from camopy.mask_decoder import MaskDecoder, MaskLogits, mask_loss
from camopy.metrics import EvalReport, evaluate_dataset
from camopy.objective import (
    LossBreakdown,
    Projector,
    consistency_loss,
    project_text,
    project_visual,
    total_loss,
)

logger = logging.getLogger(__name__)

#: State-dict prefixes that belong to the text branch.
TEXT_PREFIXES = ("text_encoder.", "text_projector.", "visual_projector.")


class CamouflageDataset(Dataset):
    """
    Torch view of a manifest. Items are dictionaries of tensors: ``image``
    (3, H, W) standardized, ``mask`` (H, W), ``fixation`` at the patch grid,
    ``attributes`` (17,), plus ``description`` and ``name``.

    :param manifest:
        Validated manifest
    :param config:
        Supplies the image size, patch grid, description length and fixation blur
    :param cache:
        Keep decoded samples in memory
    """

    def __init__(self, manifest: DatasetManifest, config: TrainConfig, cache: bool = True):
        if len(manifest) == 0:
            raise DataException("Cannot build a dataset from an empty manifest.")
        self.manifest = manifest
        self.config = config
        self.cache = cache
        self._items: Dict[int, Dict[str, Any]] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index: int) -> Dict[str, Any]:
        if index in self._items:
            return self._items[index]
        backbone = self.config.backbone
        sample = self.manifest.sample(
            index,
            backbone.image_size,
            max_words=backbone.max_words,
            fixation_sigma=self.config.fixation_sigma,
        )
        item = {
            "name": sample.name,
            "image": images_to_tensor(sample.image)[0],
            "mask": torch.from_numpy(sample.gt_mask.astype(np.float32)),
            "fixation": fixation_to_grid(
                torch.from_numpy(sample.gt_fixation), backbone.grid
            ).float(),
            "attributes": torch.from_numpy(sample.attr_gt).float(),
            "description": sample.description,
        }
        if self.cache:
            self._items[index] = item
        return item


@dataclass
class ModelOutput:
    """Everything one forward pass produces; absent components are None"""

    features: MultiLevelFeatures
    fused: FusedFeature
    mask: MaskLogits
    fixation: Optional[FixationMap] = None
    attributes: Optional[AttributeScores] = None
    visual_embedding: Optional[torch.Tensor] = None
    text_embedding: Optional[torch.Tensor] = None


@dataclass
class Prediction:
    """
    Numpy outputs of :meth:`CamouflageSegmenter.predict`.

    :param mask:
        Mask probabilities, (B, H, W)
    :param fixation:
        Fixation distributions at the patch grid, (B, rows, cols)
    :param attributes:
        Attribute proportions, (B, 17)
    """

    mask: np.ndarray
    fixation: Optional[np.ndarray] = None
    attributes: Optional[np.ndarray] = None


class CamouflageSegmenter(nn.Module):
    """
    Segmenter built from a :class:`~camopy.config.TrainConfig`.

    Public Methods
    ---------------
    - forward: one pass from images (or precomputed features) to all outputs
    - loss: the weighted objective of one batch
    - fit: trains on a dataset, returning the per-step loss records
    - predict: mask, fixation and attribute outputs as numpy arrays
    - score: evaluation measures on a dataset

    :param config:
        Model and training settings
    :param text_branch:
        Build the text encoder and projectors; defaults to
        ``config.use_consistency``. Inference builds pass False.
    :param feature_source:
        Read features from ``.feat`` files instead of running the visual backbone

    Example
    --------
    >>> import torch
    >>> from camopy.config import load_config
    >>> from camopy.models import CamouflageSegmenter
    >>> model = CamouflageSegmenter(load_config("toy"), text_branch=False).eval()
    >>> out = model(images=torch.zeros(2, 3, 64, 64))
    >>> tuple(out.mask.logits.shape), out.fixation.grid
    ((2, 64, 64), (8, 8))
    """

    def __init__(
        self,
        config: TrainConfig,
        text_branch: Optional[bool] = None,
        feature_source: Optional[PrecomputedFeatures] = None,
    ):
        super().__init__()
        self.config = config
        self.text_branch = config.use_consistency if text_branch is None else text_branch
        self.feature_source = feature_source
        bb = config.backbone
        c = bb.channels
        self.backbone = ToyVisualBackbone(bb) if feature_source is None else None
        self.fixation_decoder = (
            FixationDecoder(c, bb.num_tokens, config.fixation) if config.use_fixation else None
        )
        self.attribute_head = (
            AttributeHead(c, config.attributes) if config.use_attributes else None
        )
        self.afe = AFEFusion(
            c,
            config.afe,
            use_attributes=config.use_attributes,
            use_fixation=config.use_fixation,
        )
        self.mask_decoder = MaskDecoder(c, bb.image_size, config.mask)
        if self.text_branch:
            self.text_encoder = ToyTextEncoder(bb)
            self.visual_projector = Projector(c, config.projection)
            self.text_projector = Projector(bb.text_dim, config.projection)
        else:
            self.text_encoder = None
            self.visual_projector = None
            self.text_projector = None

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def trainable_parameters(self) -> List[nn.Parameter]:
        """Parameters the optimizer updates; frozen encoders are left out"""
        return [p for p in self.parameters() if p.requires_grad]

    def encode(
        self,
        images: Optional[torch.Tensor] = None,
        names: Optional[Sequence[str]] = None,
    ) -> MultiLevelFeatures:
        if self.feature_source is not None:
            if names is None:
                raise DataException("Precomputed features are looked up by image name.")
            return self.feature_source(names).to(self.device)
        if images is None:
            raise DataException("The visual backbone needs images.")
        return self.backbone(images.to(self.device))

    def forward(
        self,
        images: Optional[torch.Tensor] = None,
        descriptions: Optional[Sequence[str]] = None,
        names: Optional[Sequence[str]] = None,
        features: Optional[MultiLevelFeatures] = None,
    ) -> ModelOutput:
        feats = features if features is not None else self.encode(images, names)
        fix = self.fixation_decoder(feats) if self.fixation_decoder is not None else None
        attrs = self.attribute_head(feats) if self.attribute_head is not None else None
        fused = self.afe(feats, attrs, fix)
        out = ModelOutput(
            features=feats, fused=fused, mask=self.mask_decoder(fused),
            fixation=fix, attributes=attrs,
        )
        if self.text_branch and descriptions is not None:
            text = self.text_encoder.encode(list(descriptions))
            out.visual_embedding = project_visual(fused, self.visual_projector)
            out.text_embedding = project_text(text, self.text_projector)
        return out

    def loss(self, out: ModelOutput, batch: Dict[str, Any]) -> LossBreakdown:
        """The weighted objective of one batch; disabled terms are zero"""
        zero = out.mask.logits.new_zeros(())
        mask = mask_loss(out.mask, batch["mask"].to(out.mask.logits))
        fix = (
            fixation_loss(out.fixation, batch["fixation"].to(out.mask.logits))
            if out.fixation is not None
            else zero
        )
        attr = (
            attribute_loss(out.attributes, batch["attributes"].to(out.mask.logits))
            if out.attributes is not None
            else zero
        )
        consist = (
            consistency_loss(out.visual_embedding, out.text_embedding)
            if out.text_embedding is not None
            else zero
        )
        return total_loss(mask, fix, attr, consist, self.config.loss)

    def _loader(self, dataset: Dataset, generator: Optional[torch.Generator]) -> DataLoader:
        cfg = self.config
        n = len(dataset)
        if n < 2:
            raise DataException("Training needs at least two samples for batch norm.")
        batch = min(cfg.batch_size, n)
        return DataLoader(
            dataset,
            batch_size=batch,
            shuffle=True,
            generator=generator,
            num_workers=0 if cfg.deterministic else cfg.num_workers,
            drop_last=n % batch == 1,
            collate_fn=collate,
        )

    def fit(
        self,
        dataset: Dataset,
        generator: Optional[torch.Generator] = None,
        log_path: Optional[Union[str, pathlib.Path]] = None,
        on_epoch_end=None,
    ) -> List[Dict[str, float]]:
        """Train with Adam and a multi-step schedule stepped once per epoch.

        Returns one record per optimizer step with the fields ``step``,
        ``epoch``, ``lr``, ``mask``, ``fix``, ``attr``, ``consist`` and
        ``total``, which are also appended to ``log_path`` as JSON lines.

        :param dataset:
            A :class:`CamouflageDataset`
        :param generator:
            Seeded generator driving shuffling and flips
        :param log_path:
            Line-delimited JSON training log
        :param on_epoch_end:
            Callback ``(epoch, step, optimizer, epoch_records)`` run after every
            epoch, e.g. to write checkpoints
        """
        cfg = self.config
        loader = self._loader(dataset, generator)
        self.optimizer = torch.optim.Adam(self.trainable_parameters(), lr=cfg.lr)
        scheduler = torch.optim.lr_scheduler.MultiStepLR(
            self.optimizer, milestones=list(cfg.decay_epochs), gamma=cfg.lr_decay
        )
        hflip = cfg.hflip and self.feature_source is None
        history: List[Dict[str, float]] = []
        log = open(log_path, "a", encoding="utf-8") if log_path is not None else None
        step = 0
        try:
            for epoch in range(1, cfg.epochs + 1):
                self.train()
                epoch_records = []
                lr = self.optimizer.param_groups[0]["lr"]
                for batch in tqdm(loader, desc=f"epoch {epoch}", disable=not cfg.progressbar, leave=False):
                    if hflip:
                        batch = random_hflip(batch, generator)
                    out = self(
                        images=batch["image"],
                        descriptions=batch["description"] if self.text_branch else None,
                        names=batch["name"],
                    )
                    try:
                        breakdown = self.loss(out, batch)
                    except NonFiniteException:
                        logger.error("Non-finite loss at step %d; stopping", step + 1)
                        raise
                    self.optimizer.zero_grad(set_to_none=True)
                    breakdown.total.backward()
                    self.optimizer.step()
                    step += 1
                    record = {"step": step, "epoch": epoch, "lr": lr, **breakdown.to_record()}
                    history.append(record)
                    epoch_records.append(record)
                    if log is not None:
                        log.write(json.dumps(record) + "\n")
                        log.flush()
                    if cfg.max_steps is not None and step >= cfg.max_steps:
                        break
                scheduler.step()
                _log_epoch(epoch, epoch_records)
                if on_epoch_end is not None:
                    on_epoch_end(epoch, step, self.optimizer, epoch_records)
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
        finally:
            if log is not None:
                log.close()
        self.eval()
        return history

    @torch.no_grad()
    def predict(
        self,
        images: Union[np.ndarray, torch.Tensor, None] = None,
        names: Optional[Sequence[str]] = None,
    ) -> Prediction:
        """Run the visual branch in eval mode.

        :param images:
            uint8 rasters (H, W, 3) or (B, H, W, 3) at the configured image size,
            or an already standardized (B, 3, H, W) float tensor
        :param names:
            Image names, when features are precomputed
        """
        self.eval()
        if images is not None and not (
            isinstance(images, torch.Tensor) and images.is_floating_point()
        ):
            images = images_to_tensor(images)
        out = self(images=images, names=names)
        return Prediction(
            mask=out.mask.prob.double().cpu().numpy(),
            fixation=out.fixation.prob.double().cpu().numpy() if out.fixation is not None else None,
            attributes=out.attributes.proportions.cpu().numpy() if out.attributes is not None else None,
        )

    def score(self, dataset: CamouflageDataset, batch_size: int = 8) -> EvalReport:
        """Evaluation measures of the predicted masks on a dataset"""
        pairs = []
        for start in range(0, len(dataset), batch_size):
            items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            batch = collate(items)
            pred = self.predict(batch["image"], names=batch["name"])
            for i, item in enumerate(items):
                pairs.append((item["name"], pred.mask[i], item["mask"].numpy()))
        return evaluate_dataset(pairs)


def collate(items: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Stack tensors and keep strings as lists"""
    batch = {}
    for key in items[0]:
        values = [item[key] for item in items]
        batch[key] = torch.stack(values) if isinstance(values[0], torch.Tensor) else values
    return batch


def random_hflip(batch: Dict[str, Any], generator: Optional[torch.Generator]) -> Dict[str, Any]:
    """Flip a random subset of the batch left to right"""
    n = batch["image"].shape[0]
    flip = torch.rand(n, generator=generator) < 0.5
    if not flip.any():
        return batch
    out = dict(batch)
    for key in ("image", "mask", "fixation"):
        x = batch[key].clone()
        x[flip] = torch.flip(x[flip], dims=(-1,))
        out[key] = x
    return out


def _log_epoch(epoch: int, records: List[Dict[str, float]]) -> None:
    if not records:
        return
    means = {k: float(np.mean([r[k] for r in records])) for k in ("mask", "fix", "attr", "consist", "total")}
    logger.info(
        "epoch %d: total %.4f (mask %.4f, fix %.4f, attr %.4f, consist %.4f)",
        epoch, means["total"], means["mask"], means["fix"], means["attr"], means["consist"],
    )


def learning_rate_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate used during ``epoch`` (1-based): the initial rate decayed
    once for every milestone the epoch lies past.

    Example
    --------
    >>> from camopy.config import load_config
    >>> from camopy.models import learning_rate_at
    >>> cfg = load_config("default")
    >>> learning_rate_at(150, cfg), round(learning_rate_at(151, cfg), 12)
    (0.0001, 2e-05)
    """
    passed = sum(1 for milestone in config.decay_epochs if epoch > milestone)
    return config.lr * config.lr_decay**passed


def strip_text_branch(state: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Drop text-branch entries from a state dict"""
    return {k: v for k, v in state.items() if not k.startswith(TEXT_PREFIXES)}
