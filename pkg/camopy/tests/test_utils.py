"""
Tests for utility functions
"""
import math

import numpy as np
import torch

from camopy.utils import (
    _is_binary_raster,
    config_hash,
    proportional_kernel_size,
    renormalize,
    round_num,
    seed_everything,
    split_words,
)


def test_split_words():
    """Words are lower-cased and punctuation is dropped"""
    assert split_words("") == []
    assert split_words("Green  FROG, on a leaf!") == ["green", "frog", "on", "a", "leaf"]


def test_binary_raster():
    assert _is_binary_raster(np.array([[0, 1], [1, 0]])) is True
    assert _is_binary_raster(np.zeros((3, 3))) is True
    assert _is_binary_raster(np.array([[0, 255]])) is False
    assert _is_binary_raster(np.array([[0.5, 1.0]])) is False


def test_renormalize_sums_to_one(rng):
    """Renormalized random vectors sum to one and renormalizing twice changes nothing"""
    for _ in range(1000):
        values = rng.uniform(0, 1, 17) * rng.uniform(0.98, 1.02) / 8.5
        once = renormalize(values)
        assert abs(math.fsum(once.tolist()) - 1) < 1e-12
        np.testing.assert_array_equal(renormalize(once), once)


def test_proportional_kernel_size():
    assert proportional_kernel_size(336) == 31
    assert proportional_kernel_size(96) == 9
    assert all(proportional_kernel_size(s) % 2 == 1 for s in range(8, 400, 7))


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_seed_everything_repeats_draws():
    g1 = seed_everything(11)
    a = (torch.rand(3), torch.rand(3, generator=g1), np.random.rand())
    g2 = seed_everything(11)
    b = (torch.rand(3), torch.rand(3, generator=g2), np.random.rand())
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) and a[2] == b[2]


def test_round_num():
    """Test if the function to round numbers works correctly"""
    assert round_num(0.12345, None) == "0.12"
    assert round_num(0.12345, 3) == "0.123"
    assert round_num(123.456, None) == "123"
    assert round_num(0, None) == "0"
