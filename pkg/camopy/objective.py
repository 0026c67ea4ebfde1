"""
Projection of the fused visual feature and the description embedding into a
shared latent space, the cosine consistency loss, and the weighted total loss.
"""
import math
from dataclasses import dataclass
from typing import Dict, Union

import torch
from torch import nn

from camopy.afe import FusedFeature
from camopy.config import LossWeights, ProjectionConfig
from camopy.custom_exceptions import NonFiniteException, ShapeMismatchException
from camopy.encoders import TextFeature

Scalar = Union[float, torch.Tensor]
TERMS = ("mask", "fix", "attr", "consist")


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    """Unit-normalize the last axis; zero rows map to the first basis vector"""
    norm = x.norm(dim=-1, keepdim=True)
    basis = torch.zeros_like(x)
    basis[..., 0] = 1
    return torch.where(norm > 0, x / norm.clamp(min=torch.finfo(x.dtype).tiny), basis)


class Projector(nn.Module):
    """Two-layer projector followed by L2 normalization"""

    def __init__(self, in_dim: int, cfg: ProjectionConfig):
        super().__init__()
        self.in_dim = in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, cfg.shared_dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatchException(
                f"Projector expects {self.in_dim} input channels, got {x.shape[-1]}."
            )
        return l2_normalize(self.net(x))


def project_visual(fused: FusedFeature, projector: Projector) -> torch.Tensor:
    """Mean-pool the fused tokens and project them, shape (B, D_s)"""
    return projector(fused.tokens.mean(dim=1))


def project_text(text: TextFeature, projector: Projector) -> torch.Tensor:
    """Project sentence embeddings, shape (B, D_s)"""
    return projector(text.sentence_embedding)


def consistency_loss(v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """``1 - <v, t>`` of unit vectors, averaged over the batch.

    Example
    --------
    >>> import torch
    >>> from camopy.objective import consistency_loss
    >>> v = torch.tensor([[1.0, 0.0]])
    >>> consistency_loss(v, v).item(), consistency_loss(v, -v).item()
    (0.0, 2.0)
    """
    if v.shape != t.shape:
        raise ShapeMismatchException(
            f"Consistency inputs differ in shape: {tuple(v.shape)} vs {tuple(t.shape)}."
        )
    for name, x in (("visual", v), ("text", t)):
        if not torch.isfinite(x).all():
            raise NonFiniteException(f"Non-finite {name} projection in consistency loss.")
    return (1 - (v * t).sum(dim=-1)).clamp(0, 2).mean()


@dataclass
class LossBreakdown:
    """
    The four loss terms, the weights they were combined with, and the total
    ``mask + alpha * fix + beta * attr + gamma * consist``. Terms with a zero
    weight are left out of the sum.
    """

    mask: torch.Tensor
    fix: torch.Tensor
    attr: torch.Tensor
    consist: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def to_record(self) -> Dict[str, float]:
        """Float view in which ``total`` is recomputed from the reported terms, so
        the weighted identity holds exactly"""
        values = {name: float(getattr(self, name).detach()) for name in TERMS}
        values["total"] = _combine(values, self.weights)
        return values


def _combine(parts: Dict[str, Scalar], w: LossWeights):
    total = parts["mask"]
    for name, weight in (("fix", w.alpha), ("attr", w.beta), ("consist", w.gamma)):
        if weight != 0:
            total = total + weight * parts[name]
    return total


def total_loss(
    mask: Scalar, fix: Scalar, attr: Scalar, consist: Scalar, w: LossWeights
) -> LossBreakdown:
    """Combine the four terms with the balancing weights.

    :param mask:
        Mask loss
    :param fix:
        Fixation loss
    :param attr:
        Attribute loss
    :param consist:
        Consistency loss
    :param w:
        Weights alpha, beta and gamma

    Example
    --------
    >>> from camopy.config import LossWeights
    >>> from camopy.objective import total_loss
    >>> parts = total_loss(0.5, 0.2, 0.1, 0.3, LossWeights(1, 2, 3))
    >>> round(parts.total.item(), 6)
    1.8
    """
    parts = {}
    for name, value in zip(TERMS, (mask, fix, attr, consist)):
        if not isinstance(value, torch.Tensor):
            value = torch.as_tensor(value, dtype=torch.get_default_dtype())
        if not math.isfinite(float(value.detach())):
            raise NonFiniteException(f"Loss term {name!r} is not finite: {float(value)}.")
        parts[name] = value
    return LossBreakdown(**parts, total=_combine(parts, w), weights=w)
