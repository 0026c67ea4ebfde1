"""
Fixation prediction: a cross-attention decoder over the three feature levels
that predicts where observers look, and the KL + correlation fixation loss.
"""
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from camopy.config import FixationDecoderConfig
from camopy.custom_exceptions import ShapeMismatchException
from camopy.encoders import MultiLevelFeatures

#: Smoothing inside the logarithms of the KL term.
KL_EPS = 1e-8


@dataclass
class FixationMap:
    """
    Predicted fixation over the patch grid.

    :param logits:
        Tensor of shape (B, rows, cols)
    """

    logits: torch.Tensor

    def __post_init__(self):
        if self.logits.dim() != 3:
            raise ShapeMismatchException(
                f"Fixation logits must be (B, rows, cols), got {tuple(self.logits.shape)}."
            )

    @property
    def grid(self) -> Tuple[int, int]:
        return tuple(self.logits.shape[1:])

    @property
    def prob(self) -> torch.Tensor:
        """Spatial softmax of the logits; every map sums to one"""
        flat = rearrange(self.logits, "b h w -> b (h w)")
        rows, cols = self.grid
        return rearrange(F.softmax(flat, dim=-1), "b (h w) -> b h w", h=rows, w=cols)


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention followed by a feed-forward layer, both residual"""

    def __init__(self, channels: int, kv_channels: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(channels * mlp_ratio)
        self.norm_q = nn.LayerNorm(channels)
        self.norm_kv = nn.LayerNorm(kv_channels)
        self.attn = nn.MultiheadAttention(
            channels, heads, kdim=kv_channels, vdim=kv_channels, batch_first=True
        )
        self.norm_ff = nn.LayerNorm(channels)
        self.ff = nn.Sequential(
            nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels)
        )

    def forward(self, x: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        kv = self.norm_kv(kv)
        x = x + self.attn(self.norm_q(x), kv, kv, need_weights=False)[0]
        return x + self.ff(self.norm_ff(x))


class FixationDecoder(nn.Module):
    """
    Queries with the deepest level and attends over the channelwise
    concatenation of all three layer-normalized levels. The first
    cross-attention is added to ``LN(F2)`` and the positional embedding, then
    ``cfg.blocks`` decoder blocks refine it. A linear layer reduces every grid
    token to one value and a 2-D convolution smooths the resulting grid.

    :param channels:
        Token width C of the feature levels
    :param num_tokens:
        Tokens per level, including a class token if present
    :param cfg:
        Decoder settings
    """

    def __init__(self, channels: int, num_tokens: int, cfg: FixationDecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        self.num_tokens = num_tokens
        kv = 3 * channels
        self.level_norms = nn.ModuleList([nn.LayerNorm(channels) for _ in range(3)])
        self.query_norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(
            channels, cfg.heads, kdim=kv, vdim=kv, batch_first=True
        )
        if cfg.positional:
            self.positions = nn.Parameter(torch.zeros(1, num_tokens, channels))
            nn.init.trunc_normal_(self.positions, std=0.02)
        else:
            self.register_buffer("positions", torch.zeros(1, num_tokens, channels))
        self.blocks = nn.ModuleList(
            [
                CrossAttentionBlock(channels, kv, cfg.heads, cfg.mlp_ratio)
                for _ in range(cfg.blocks)
            ]
        )
        self.head_norm = nn.LayerNorm(channels)
        self.linear = nn.Linear(channels, 1)
        self.conv = nn.Conv2d(
            1,
            1,
            kernel_size=cfg.conv_kernel,
            padding=cfg.conv_kernel // 2,
            padding_mode="replicate",
        )

    def forward(self, feats: MultiLevelFeatures) -> FixationMap:
        if (feats.channels, feats.num_tokens) != (self.channels, self.num_tokens):
            raise ShapeMismatchException(
                f"Fixation decoder expects {self.num_tokens} tokens x {self.channels} "
                f"channels, got {feats.num_tokens} x {feats.channels}."
            )
        kv = torch.cat(
            [norm(level) for norm, level in zip(self.level_norms, feats.levels)], dim=-1
        )
        deep = self.query_norm(feats.levels[2])
        x = self.attn(deep, kv, kv, need_weights=False)[0] + deep + self.positions
        for block in self.blocks:
            x = block(x, kv)
        if feats.cls_present:
            x = x[:, 1:]
        rows, cols = feats.grid
        values = self.linear(self.head_norm(x))
        grid = rearrange(values, "b (h w) 1 -> b 1 h w", h=rows, w=cols)
        return FixationMap(self.conv(grid)[:, 0])


def predict_fixation(feats: MultiLevelFeatures, decoder: FixationDecoder) -> FixationMap:
    return decoder(feats)


def _flatten(x: torch.Tensor) -> torch.Tensor:
    return rearrange(x, "b h w -> b (h w)")


def _as_batch(pred: FixationMap, gt: torch.Tensor) -> torch.Tensor:
    if gt.dim() == 2:
        gt = gt.unsqueeze(0)
    if tuple(gt.shape) != tuple(pred.logits.shape):
        raise ShapeMismatchException(
            f"Fixation target of shape {tuple(gt.shape)} does not match prediction "
            f"{tuple(pred.logits.shape)}."
        )
    return gt.to(pred.logits.dtype)


def kl_divergence(gt: torch.Tensor, prob: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    """Per-map KL(gt || prob) with ``eps`` inside the logarithm, shape (B,)"""
    gt, prob = _flatten(gt), _flatten(prob)
    return (gt * torch.log((gt + eps) / (prob + eps))).sum(dim=-1)


def correlation_coefficient(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-map Pearson correlation, shape (B,).

    Two constant maps correlate perfectly (1); a constant map against a varying
    one gives 0.
    """
    a = _flatten(a)
    b = _flatten(b)
    a = a - a.mean(dim=-1, keepdim=True)
    b = b - b.mean(dim=-1, keepdim=True)
    var_a = (a * a).sum(dim=-1)
    var_b = (b * b).sum(dim=-1)
    cov = (a * b).sum(dim=-1)
    both = (var_a > 0) & (var_b > 0)
    denom = torch.sqrt(torch.where(both, var_a * var_b, torch.ones_like(var_a)))
    cc = torch.where(both, cov / denom, torch.zeros_like(cov))
    return torch.where((var_a == 0) & (var_b == 0), torch.ones_like(cc), cc)


def fixation_loss(pred: FixationMap, gt: torch.Tensor) -> torch.Tensor:
    """``KL(gt || pred.prob) + (1 - CC(pred.prob, gt))`` averaged over the batch.

    :param pred:
        Predicted fixation map
    :param gt:
        Normalized fixation at the prediction's grid, (rows, cols) or
        (B, rows, cols)

    Example
    --------
    >>> import torch
    >>> from camopy.fixation import FixationMap, fixation_loss
    >>> gt = torch.tensor([[[0.4, 0.1], [0.3, 0.2]]], dtype=torch.float64)
    >>> pred = FixationMap(torch.zeros(1, 2, 2, dtype=torch.float64))
    >>> round(fixation_loss(pred, gt).item(), 5)
    1.10644
    """
    gt = _as_batch(pred, gt)
    prob = pred.prob
    loss = kl_divergence(gt, prob) + (1 - correlation_coefficient(prob, gt))
    return loss.mean()


def fixation_to_grid(fixation: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """Area-downsample pixel fixation maps (B, H, W) to the patch grid and
    renormalize each map to sum one."""
    squeeze = fixation.dim() == 2
    if squeeze:
        fixation = fixation.unsqueeze(0)
    pooled = F.adaptive_avg_pool2d(fixation.unsqueeze(1), grid)[:, 0]
    total = pooled.sum(dim=(-2, -1), keepdim=True)
    uniform = torch.full_like(pooled, 1.0 / (grid[0] * grid[1]))
    pooled = torch.where(total > 0, pooled / total.clamp(min=torch.finfo(pooled.dtype).tiny), uniform)
    return pooled[0] if squeeze else pooled
