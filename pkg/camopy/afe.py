"""
Attributes-Fixation Embedding: per-branch attribute gating, fixation attention
and weighted fusion of the three feature levels.
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from camopy.attributes import AttributeScores
from camopy.config import AFEConfig
from camopy.custom_exceptions import ShapeMismatchException
from camopy.data.taxonomy import N_ATTRIBUTES
from camopy.encoders import MultiLevelFeatures
from camopy.fixation import FixationMap


@dataclass
class FusedFeature:
    """
    :param tokens:
        Layer-normalized fused tokens of shape (B, L, C)
    :param grid:
        Patch grid of the tokens
    :param cls_present:
        Whether token 0 is a class token
    """

    tokens: torch.Tensor
    grid: tuple
    cls_present: bool = False


class AttributeGate(nn.Module):
    """
    Squeeze-and-excitation gate conditioned on attribute scores.

    The branch is linearly projected to ``x``; the token mean of ``x`` is
    concatenated with the 17 raw attribute scores and passed through a
    bottleneck ending in a sigmoid. The channel scales multiply ``x`` and the
    branch is added back.

    :param channels:
        Token width C
    :param reduction:
        Bottleneck ratio
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.channels = channels
        bottleneck = max(channels // reduction, 1)
        self.linear = nn.Linear(channels, channels)
        self.excitation = nn.Sequential(
            nn.Linear(channels + N_ATTRIBUTES, bottleneck),
            nn.ReLU(),
            nn.Linear(bottleneck, channels),
            nn.Sigmoid(),
        )

    def forward(self, branch: torch.Tensor, attrs: AttributeScores) -> torch.Tensor:
        if branch.dim() != 3 or branch.shape[-1] != self.channels:
            raise ShapeMismatchException(
                f"Gate expects (B, L, {self.channels}) tokens, got {tuple(branch.shape)}."
            )
        if attrs.raw.shape[0] != branch.shape[0]:
            raise ShapeMismatchException(
                f"Attribute batch {attrs.raw.shape[0]} does not match branch batch "
                f"{branch.shape[0]}."
            )
        x = self.linear(branch)
        squeeze = torch.cat([x.mean(dim=1), attrs.raw.to(x.dtype)], dim=-1)
        scales = self.excitation(squeeze)
        return x * scales.unsqueeze(1) + branch


class FixationAttention(nn.Module):
    """
    Reweights tokens by a learned scalar function of the fixation probability
    at their grid cell.

    Each grid token gets ``z = Linear(prob * cells)``; the weights are
    ``exp(z - max z) / mean(exp(z - max z))``, i.e. ``L`` times a softmax over
    the grid tokens, so a uniform fixation leaves the branch unchanged. A class
    token keeps weight one.
    """

    def __init__(self):
        super().__init__()
        self.linear = nn.Linear(1, 1)

    def weights(self, fix: FixationMap) -> torch.Tensor:
        """Per-token scales of shape (B, rows * cols), averaging exactly one"""
        prob = fix.prob
        cells = prob.shape[1] * prob.shape[2]
        z = self.linear((prob.reshape(prob.shape[0], cells, 1) * cells))[..., 0]
        e = torch.exp(z - z.max(dim=1, keepdim=True).values)
        return e / e.mean(dim=1, keepdim=True)

    def forward(
        self, branch: torch.Tensor, fix: FixationMap, cls_present: bool = False
    ) -> torch.Tensor:
        cells = fix.grid[0] * fix.grid[1]
        if branch.shape[1] != cells + int(cls_present) or branch.shape[0] != fix.logits.shape[0]:
            raise ShapeMismatchException(
                f"Fixation grid {fix.grid} (cls={cls_present}) does not match "
                f"{tuple(branch.shape[:2])} tokens."
            )
        w = self.weights(fix).to(branch.dtype)
        if cls_present:
            w = torch.cat([torch.ones_like(w[:, :1]), w], dim=1)
        return branch * w.unsqueeze(-1)


class AFEFusion(nn.Module):
    """
    Gate each level with the attribute scores, weight it by fixation attention,
    and combine the branches as ``LN(sum_i W_i * branch_i / sum_i W_i)``.

    :param channels:
        Token width C
    :param cfg:
        Branch weights and gate reduction
    :param use_attributes:
        Build the attribute gates; when false branches pass through ungated
    :param use_fixation:
        Build fixation attention; when false branches are not reweighted
    """

    def __init__(
        self,
        channels: int,
        cfg: AFEConfig,
        use_attributes: bool = True,
        use_fixation: bool = True,
    ):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("branch_weights", torch.tensor(cfg.weights))
        self.gates = (
            nn.ModuleList([AttributeGate(channels, cfg.reduction) for _ in range(3)])
            if use_attributes
            else None
        )
        self.attention = (
            nn.ModuleList([FixationAttention() for _ in range(3)]) if use_fixation else None
        )
        self.norm = nn.LayerNorm(channels)

    def branches(
        self,
        feats: MultiLevelFeatures,
        attrs: Optional[AttributeScores],
        fix: Optional[FixationMap],
    ) -> list:
        """The three gated and fixation-weighted branches"""
        out = []
        for i, level in enumerate(feats.levels):
            x = level
            if self.gates is not None:
                x = self.gates[i](x, attrs)
            if self.attention is not None:
                x = self.attention[i](x, fix, feats.cls_present)
            out.append(x)
        return out

    def combine(self, branches: Sequence[torch.Tensor]) -> torch.Tensor:
        """Weighted branch mean before layer normalization"""
        w = self.branch_weights.to(branches[0].dtype)
        total = sum(w[i] * b for i, b in enumerate(branches))
        return total / w.sum()

    def forward(
        self,
        feats: MultiLevelFeatures,
        attrs: Optional[AttributeScores] = None,
        fix: Optional[FixationMap] = None,
    ) -> FusedFeature:
        if self.gates is not None and attrs is None:
            raise ShapeMismatchException("AFE built with attribute gates needs attribute scores.")
        if self.attention is not None and fix is None:
            raise ShapeMismatchException("AFE built with fixation attention needs a fixation map.")
        pre = self.combine(self.branches(feats, attrs, fix))
        return FusedFeature(self.norm(pre), feats.grid, feats.cls_present)


def attribute_gate(branch: torch.Tensor, attrs: AttributeScores, gate: AttributeGate) -> torch.Tensor:
    return gate(branch, attrs)


def fixation_attend(
    branch: torch.Tensor, fix: FixationMap, attention: FixationAttention, cls_present: bool = False
) -> torch.Tensor:
    return attention(branch, fix, cls_present)


def fuse(
    feats: MultiLevelFeatures,
    attrs: Optional[AttributeScores],
    fix: Optional[FixationMap],
    fusion: AFEFusion,
) -> FusedFeature:
    return fusion(feats, attrs, fix)
