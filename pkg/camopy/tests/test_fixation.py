"""
Tests for the fixation decoder and the fixation loss
"""
import math

import pytest
import torch

from camopy.config import FixationDecoderConfig
from camopy.custom_exceptions import ShapeMismatchException
from camopy.encoders import MultiLevelFeatures
from camopy.fixation import (
    FixationDecoder,
    FixationMap,
    correlation_coefficient,
    fixation_loss,
    fixation_to_grid,
    kl_divergence,
    predict_fixation,
)

GRID = (4, 4)
C = 16


def _features(batch=2, seed=0, cls_present=False):
    g = torch.Generator().manual_seed(seed)
    tokens = GRID[0] * GRID[1] + int(cls_present)
    levels = tuple(torch.randn(batch, tokens, C, generator=g) for _ in range(3))
    return MultiLevelFeatures(levels, GRID, cls_present)


def _decoder(tokens=16, **kwargs):
    values = dict(blocks=1, heads=2, mlp_ratio=2.0)
    values.update(kwargs)
    return FixationDecoder(C, tokens, FixationDecoderConfig(**values)).eval()


def test_loss_hand_value():
    gt = torch.tensor([[[0.4, 0.1], [0.3, 0.2]]], dtype=torch.float64)
    pred = FixationMap(torch.zeros(1, 2, 2, dtype=torch.float64))
    expected = sum(g * math.log(g / 0.25) for g in (0.4, 0.1, 0.3, 0.2)) + 1.0
    assert fixation_loss(pred, gt).item() == pytest.approx(expected, abs=1e-6)


def test_loss_of_matching_prediction_is_zero():
    gt = torch.tensor([[0.05, 0.15, 0.3], [0.2, 0.1, 0.2]], dtype=torch.float64)
    pred = FixationMap(torch.log(gt).unsqueeze(0))
    assert abs(fixation_loss(pred, gt).item()) < 1e-6


def test_uniform_against_uniform_is_zero():
    gt = torch.full((2, 3, 3), 1 / 9, dtype=torch.float64)
    pred = FixationMap(torch.zeros(2, 3, 3, dtype=torch.float64))
    assert abs(fixation_loss(pred, gt).item()) < 1e-12


def test_prob_sums_to_one():
    torch.manual_seed(0)
    prob = FixationMap(5 * torch.randn(3, 4, 5)).prob
    torch.testing.assert_close(prob.sum(dim=(1, 2)), torch.ones(3))


def test_correlation_edge_cases():
    flat = torch.ones(1, 2, 2)
    varying = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    assert correlation_coefficient(flat, flat).item() == 1.0
    assert correlation_coefficient(flat, varying).item() == 0.0
    assert correlation_coefficient(varying, -varying).item() == pytest.approx(-1.0)


def test_kl_is_nonnegative():
    g = torch.Generator().manual_seed(1)
    a = torch.rand(5, 3, 3, generator=g)
    b = torch.rand(5, 3, 3, generator=g)
    a, b = a / a.sum(dim=(1, 2), keepdim=True), b / b.sum(dim=(1, 2), keepdim=True)
    assert bool((kl_divergence(a, b) >= -1e-7).all())


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradcheck(seed):
    g = torch.Generator().manual_seed(seed)
    gt = torch.rand(2, 3, 3, generator=g, dtype=torch.float64)
    gt = gt / gt.sum(dim=(1, 2), keepdim=True)
    logits = torch.randn(2, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: fixation_loss(FixationMap(x), gt), (logits,))


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatchException, match="does not match"):
        fixation_loss(FixationMap(torch.zeros(1, 3, 3)), torch.zeros(1, 4, 4))


def test_decoder_output_geometry():
    torch.manual_seed(0)
    fix = predict_fixation(_features(), _decoder())
    assert tuple(fix.logits.shape) == (2, 4, 4)
    assert fix.grid == GRID
    torch.testing.assert_close(fix.prob.sum(dim=(1, 2)), torch.ones(2))


def test_decoder_drops_class_token():
    torch.manual_seed(0)
    fix = _decoder(tokens=17)(_features(cls_present=True))
    assert tuple(fix.logits.shape) == (2, 4, 4)


def test_decoder_rejects_wrong_geometry():
    with pytest.raises(ShapeMismatchException, match="expects 17 tokens"):
        _decoder(tokens=17)(_features())


def test_decoder_depth_changes_output():
    feats = _features(batch=1)
    torch.manual_seed(0)
    one = _decoder(blocks=1)(feats).logits
    torch.manual_seed(0)
    three = _decoder(blocks=3)(feats).logits
    assert not torch.allclose(one, three)


def test_identical_tokens_give_uniform_fixation():
    """Without positions the decoder cannot tell identical tokens apart"""
    torch.manual_seed(0)
    token = torch.randn(1, 1, C)
    level = token.expand(1, 16, C).clone()
    feats = MultiLevelFeatures((level, level, level), GRID)
    prob = _decoder(positional=False)(feats).prob
    torch.testing.assert_close(prob, torch.full_like(prob, 1 / 16), atol=1e-5, rtol=0)


def test_flip_equivariance():
    """Flipping the token grid flips the prediction when no positions are used"""
    torch.manual_seed(0)
    decoder = _decoder(positional=False, conv_kernel=1)
    feats = _features(batch=1)

    def flip(level):
        grid = level.reshape(1, GRID[0], GRID[1], C)
        return grid.flip(2).reshape(1, -1, C)

    flipped = MultiLevelFeatures(tuple(flip(level) for level in feats.levels), GRID)
    with torch.no_grad():
        a = decoder(feats).prob
        b = decoder(flipped).prob
    torch.testing.assert_close(b, a.flip(2), atol=1e-5, rtol=1e-4)


def test_decoder_gradients_reach_every_level():
    torch.manual_seed(0)
    feats = _features(batch=1)
    levels = tuple(level.clone().requires_grad_(True) for level in feats.levels)
    decoder = _decoder()
    gt = torch.full((1, 4, 4), 1 / 16)
    gt[0, 1, 2] += 0.2
    gt = gt / gt.sum()
    fixation_loss(decoder(MultiLevelFeatures(levels, GRID)), gt).backward()
    for level in levels:
        assert level.grad is not None and float(level.grad.abs().sum()) > 0


def test_fixation_to_grid():
    fixation = torch.zeros(8, 8, dtype=torch.float64)
    fixation[0:2, 0:2] = 1.0
    fixation[6:8, 6:8] = 3.0
    grid = fixation_to_grid(fixation, (4, 4))
    assert tuple(grid.shape) == (4, 4)
    assert grid.sum().item() == pytest.approx(1.0)
    assert grid[0, 0].item() == pytest.approx(0.25)
    assert grid[3, 3].item() == pytest.approx(0.75)

    empty = fixation_to_grid(torch.zeros(2, 8, 8), (2, 2))
    torch.testing.assert_close(empty, torch.full((2, 2, 2), 0.25))
