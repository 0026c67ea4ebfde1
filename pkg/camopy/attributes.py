"""
Attribute-contribution head and its loss.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from camopy.config import AttributeHeadConfig
from camopy.custom_exceptions import ShapeMismatchException
from camopy.data.taxonomy import N_ATTRIBUTES
from camopy.encoders import MultiLevelFeatures


@dataclass
class AttributeScores:
    """
    Predicted attribute contributions.

    :param raw:
        Unconstrained head output of shape (B, 17); the loss is computed on it
    """

    raw: torch.Tensor

    def __post_init__(self):
        if self.raw.dim() == 1:
            self.raw = self.raw.unsqueeze(0)
        if self.raw.dim() != 2 or self.raw.shape[1] != N_ATTRIBUTES:
            raise ShapeMismatchException(
                f"Attribute scores must have {N_ATTRIBUTES} components, got shape "
                f"{tuple(self.raw.shape)}."
            )

    @property
    def proportions(self) -> torch.Tensor:
        """Reporting view in float64: raw clamped at zero and renormalized to sum
        one, uniform where every component is clamped away"""
        clamped = self.raw.detach().double().clamp(min=0)
        total = clamped.sum(dim=-1, keepdim=True)
        uniform = torch.full_like(clamped, 1.0 / N_ATTRIBUTES)
        return torch.where(total > 0, clamped / total.clamp(min=1e-300), uniform)


class AttributeHead(nn.Module):
    """
    Layer-normalize each level, concatenate channelwise, mean-pool over tokens,
    then Linear, BatchNorm, ReLU, Dropout and a final Linear to 17 outputs.

    :param channels:
        Token width C of each level
    :param cfg:
        Head settings
    """

    def __init__(self, channels: int, cfg: AttributeHeadConfig):
        super().__init__()
        self.channels = channels
        self.level_norms = nn.ModuleList([nn.LayerNorm(channels) for _ in range(3)])
        self.mlp = nn.Sequential(
            nn.Linear(3 * channels, cfg.hidden),
            nn.BatchNorm1d(cfg.hidden),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.hidden, cfg.n_attributes),
        )

    def forward(self, feats: MultiLevelFeatures) -> AttributeScores:
        if feats.channels != self.channels:
            raise ShapeMismatchException(
                f"Attribute head expects {self.channels} channels, got {feats.channels}."
            )
        x = torch.cat(
            [norm(level) for norm, level in zip(self.level_norms, feats.levels)], dim=-1
        )
        return AttributeScores(self.mlp(x.mean(dim=1)))


def predict_attributes(feats: MultiLevelFeatures, head: AttributeHead) -> AttributeScores:
    return head(feats)


def attribute_loss(pred: AttributeScores, attr_gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error between ``pred.raw`` and the labelled proportions.

    :param pred:
        Predicted scores
    :param attr_gt:
        Tensor of shape (17,) or (B, 17)

    Example
    --------
    >>> import torch
    >>> from camopy.attributes import AttributeScores, attribute_loss
    >>> gt = torch.full((17,), 1 / 17, dtype=torch.float64)
    >>> round(attribute_loss(AttributeScores(gt + 0.1), gt).item(), 12)
    0.01
    """
    if attr_gt.dim() == 1:
        attr_gt = attr_gt.unsqueeze(0)
    if attr_gt.shape[-1] != N_ATTRIBUTES:
        raise ShapeMismatchException(
            f"Attribute target must have {N_ATTRIBUTES} components, got "
            f"{attr_gt.shape[-1]}."
        )
    if attr_gt.shape[0] != pred.raw.shape[0]:
        raise ShapeMismatchException(
            f"Attribute target batch {attr_gt.shape[0]} does not match prediction "
            f"batch {pred.raw.shape[0]}."
        )
    return F.mse_loss(pred.raw, attr_gt.to(pred.raw.dtype))
