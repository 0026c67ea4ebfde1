"""
Tests for the projectors, the consistency loss and the total objective
"""
import math

import pytest
import torch

from camopy.afe import FusedFeature
from camopy.config import LossWeights, ProjectionConfig
from camopy.custom_exceptions import NonFiniteException, ShapeMismatchException
from camopy.encoders import TextFeature
from camopy.objective import (
    LossBreakdown,
    Projector,
    consistency_loss,
    l2_normalize,
    project_text,
    project_visual,
    total_loss,
)


def test_l2_normalize_unit_norm():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(20, 7, generator=g, dtype=torch.float64)
    torch.testing.assert_close(l2_normalize(x).norm(dim=-1), torch.ones(20, dtype=torch.float64))


def test_l2_normalize_zero_row():
    out = l2_normalize(torch.zeros(2, 3))
    torch.testing.assert_close(out, torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))


def test_projections_are_unit_and_deterministic():
    torch.manual_seed(0)
    cfg = ProjectionConfig(shared_dim=8, hidden=16)
    visual, text = Projector(6, cfg), Projector(4, cfg)
    fused = FusedFeature(torch.randn(3, 9, 6), (3, 3))
    sentences = TextFeature(torch.randn(3, 4))
    v = project_visual(fused, visual)
    t = project_text(sentences, text)
    assert tuple(v.shape) == tuple(t.shape) == (3, 8)
    torch.testing.assert_close(v.norm(dim=-1), torch.ones(3))
    torch.testing.assert_close(t.norm(dim=-1), torch.ones(3))
    assert torch.equal(v, project_visual(fused, visual))


def test_projector_input_width():
    projector = Projector(6, ProjectionConfig(shared_dim=8, hidden=16))
    with pytest.raises(ShapeMismatchException, match="expects 6"):
        projector(torch.zeros(1, 5))


def test_consistency_bounds():
    v = l2_normalize(torch.tensor([[0.3, -0.2, 0.9]]))
    assert consistency_loss(v, v).item() == pytest.approx(0.0, abs=1e-7)
    assert consistency_loss(v, -v).item() == pytest.approx(2.0, abs=1e-7)


def test_consistency_matches_dot_products():
    g = torch.Generator().manual_seed(1)
    v = l2_normalize(torch.randn(5, 4, generator=g, dtype=torch.float64))
    t = l2_normalize(torch.randn(5, 4, generator=g, dtype=torch.float64))
    dots = [sum(v[i, k].item() * t[i, k].item() for k in range(4)) for i in range(5)]
    expected = sum(1 - d for d in dots) / 5
    assert consistency_loss(v, t).item() == pytest.approx(expected, abs=1e-12)
    assert consistency_loss(v, t).item() == consistency_loss(t, v).item()


@pytest.mark.parametrize("seed", range(20))
def test_consistency_gradcheck(seed):
    """Differentiable through the normalization of both projections"""
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(3, 5, generator=g, dtype=torch.float64, requires_grad=True)
    b = torch.randn(3, 5, generator=g, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda x, y: consistency_loss(l2_normalize(x), l2_normalize(y)), (a, b)
    )


def test_consistency_errors():
    v = torch.tensor([[1.0, 0.0]])
    with pytest.raises(NonFiniteException, match="visual"):
        consistency_loss(torch.tensor([[float("nan"), 0.0]]), v)
    with pytest.raises(ShapeMismatchException):
        consistency_loss(v, torch.zeros(1, 3))


@pytest.mark.parametrize(
    "weights, expected",
    [
        ((1.0, 1.0, 1.0), 4.0),
        ((0.0, 0.0, 0.0), 1.0),
        ((0.5, 2.0, 0.1), 1.0 + 0.5 + 2.0 + 0.1),
    ],
)
def test_total_loss_with_unit_terms(weights, expected):
    parts = total_loss(1.0, 1.0, 1.0, 1.0, LossWeights(*weights))
    assert isinstance(parts, LossBreakdown)
    assert parts.total.item() == pytest.approx(expected)


def test_total_loss_hand_value():
    parts = total_loss(0.5, 0.2, 0.1, 0.3, LossWeights(1, 2, 3))
    assert parts.total.item() == pytest.approx(0.5 + 0.2 + 0.2 + 0.9)


def test_record_holds_weighted_identity():
    w = LossWeights(0.7, 1.3, 0.4)
    record = total_loss(0.61, 0.33, 0.017, 0.25, w).to_record()
    assert set(record) == {"mask", "fix", "attr", "consist", "total"}
    assert record["total"] == (
        record["mask"] + w.alpha * record["fix"] + w.beta * record["attr"]
        + w.gamma * record["consist"]
    )


def test_zero_gamma_ignores_consistency():
    mask = torch.tensor(0.4, requires_grad=True)
    consist = torch.tensor(0.9, requires_grad=True)
    parts = total_loss(mask, 0.0, 0.0, consist, LossWeights(1, 1, 0))
    assert parts.total.item() == pytest.approx(0.4)
    parts.total.backward()
    assert consist.grad is None
    assert mask.grad.item() == 1.0


def test_non_finite_term_is_named():
    with pytest.raises(NonFiniteException, match="'fix'"):
        total_loss(0.1, float("inf"), 0.1, 0.1, LossWeights())
    with pytest.raises(NonFiniteException, match="'mask'"):
        total_loss(torch.tensor(math.nan), 0.0, 0.0, 0.0, LossWeights())


def test_negative_weight_rejected():
    from camopy.custom_exceptions import ConfigException

    with pytest.raises(ConfigException, match="gamma"):
        LossWeights(1, 1, -0.5)
