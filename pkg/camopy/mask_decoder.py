"""
Mask decoder and the boundary-weighted BCE + IoU mask loss.
"""
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from camopy.afe import FusedFeature
from camopy.config import MaskDecoderConfig
from camopy.custom_exceptions import ShapeMismatchException
from camopy.utils import proportional_kernel_size


@dataclass
class MaskLogits:
    """
    :param logits:
        Tensor of shape (B, H, W) at the input image resolution
    """

    logits: torch.Tensor

    @property
    def prob(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class MaskDecoder(nn.Module):
    """
    ``cfg.blocks`` pre-norm self-attention blocks over the fused tokens, then the
    grid goes through Conv-BN-ReLU, a bilinear upsampling by ``cfg.upsample``, a
    convolution to one channel and a bilinear resize to ``image_size``.

    :param channels:
        Token width C
    :param image_size:
        Side of the output logits
    :param cfg:
        Decoder settings
    """

    def __init__(self, channels: int, image_size: int, cfg: MaskDecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        self.blocks = nn.ModuleList(
            [
                nn.TransformerEncoderLayer(
                    d_model=channels,
                    nhead=cfg.heads,
                    dim_feedforward=int(channels * cfg.mlp_ratio),
                    dropout=0.0,
                    activation="gelu",
                    batch_first=True,
                    norm_first=True,
                )
                for _ in range(cfg.blocks)
            ]
        )
        self.norm = nn.LayerNorm(channels)
        self.cbr = nn.Sequential(
            nn.Conv2d(channels, cfg.conv_channels, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(cfg.conv_channels),
            nn.ReLU(inplace=True),
        )
        self.out = nn.Conv2d(cfg.conv_channels, 1, kernel_size=3, padding=1)

    def forward(self, fused: FusedFeature) -> MaskLogits:
        rows, cols = fused.grid
        tokens = fused.tokens
        if rows != cols:
            raise ShapeMismatchException(f"Mask decoder needs a square grid, got {fused.grid}.")
        if tokens.shape[1] != rows * cols + int(fused.cls_present):
            raise ShapeMismatchException(
                f"Grid {fused.grid} (cls={fused.cls_present}) does not match "
                f"{tokens.shape[1]} tokens."
            )
        x = tokens
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        if fused.cls_present:
            x = x[:, 1:]
        x = rearrange(x, "b (h w) c -> b c h w", h=rows, w=cols)
        x = self.cbr(x)
        x = F.interpolate(
            x, scale_factor=self.cfg.upsample, mode="bilinear", align_corners=False
        )
        x = self.out(x)
        if x.shape[-1] != self.image_size:
            x = F.interpolate(
                x,
                size=(self.image_size, self.image_size),
                mode="bilinear",
                align_corners=False,
            )
        return MaskLogits(x[:, 0])


def predict_mask(fused: FusedFeature, decoder: MaskDecoder) -> MaskLogits:
    return decoder(fused)


def boundary_weights(gt: torch.Tensor, kernel: Optional[int] = None) -> torch.Tensor:
    """Pixel weights ``1 + 5 * |mean_pool(gt) - gt|`` of (B, H, W) masks.

    The mean pool has stride one and zero same-padding counted in the mean;
    ``kernel`` defaults to 31 at 336 px, scaled with the image side.
    """
    if kernel is None:
        kernel = proportional_kernel_size(gt.shape[-1])
    pooled = F.avg_pool2d(
        gt.unsqueeze(1), kernel_size=kernel, stride=1, padding=kernel // 2,
        count_include_pad=True,
    )[:, 0]
    return 1 + 5 * torch.abs(pooled - gt)


def mask_loss(
    pred: MaskLogits, gt_mask: torch.Tensor, kernel: Optional[int] = None
) -> torch.Tensor:
    """Weighted BCE plus weighted IoU, averaged over the batch.

    :param pred:
        Predicted logits
    :param gt_mask:
        Binary masks, (H, W) or (B, H, W), matching ``pred.logits``
    :param kernel:
        Pooling kernel of the boundary weights
    """
    logits = pred.logits
    if gt_mask.dim() == 2:
        gt_mask = gt_mask.unsqueeze(0)
    if tuple(gt_mask.shape) != tuple(logits.shape):
        raise ShapeMismatchException(
            f"Mask of shape {tuple(gt_mask.shape)} does not match logits "
            f"{tuple(logits.shape)}."
        )
    gt = gt_mask.to(logits.dtype)
    weight = boundary_weights(gt, kernel)
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    wbce = (weight * bce).sum(dim=(1, 2)) / weight.sum(dim=(1, 2))
    prob = torch.sigmoid(logits)
    inter = (weight * prob * gt).sum(dim=(1, 2))
    union = (weight * (prob + gt)).sum(dim=(1, 2))
    wiou = 1 - (inter + 1) / (union - inter + 1)
    return (wbce + wiou).mean()
