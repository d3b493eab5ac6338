from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from tmf_classifier.model import EPS, ShapeMismatch, bce_loss


def test_hand_worked_two_by_two():
    y = [[1.0, 0.0], [0.0, 1.0]]
    y_hat = [[0.9, 0.1], [0.2, 0.8]]
    expected = -(2 * math.log(0.9) + 2 * math.log(0.8)) / 4
    assert bce_loss(y, y_hat) == pytest.approx(expected, abs=1e-9)
    assert bce_loss(y, y_hat) == pytest.approx(0.16425, abs=1e-5)


def test_uniform_half_is_ln_two():
    y = np.asarray([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    y_hat = np.full_like(y, 0.5)
    assert bce_loss(y, y_hat) == pytest.approx(math.log(2.0), abs=1e-9)
    flipped = 1.0 - y
    assert bce_loss(flipped, y_hat) == pytest.approx(math.log(2.0), abs=1e-9)


def test_perfect_fit_limit_is_near_zero():
    y = np.asarray([[1.0, 0.0], [0.0, 1.0]])
    y_hat = np.where(y == 1.0, 1.0 - EPS, EPS)
    assert 0.0 <= bce_loss(y, y_hat) < 1e-6


def test_loss_nonnegative_on_random_inputs():
    rng = np.random.default_rng(5)
    for _ in range(100):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        y = rng.integers(0, 2, size=shape).astype(np.float64)
        y_hat = rng.uniform(0, 1, size=shape)
        assert bce_loss(y, y_hat) >= 0.0


def test_clamping_handles_extreme_probabilities():
    assert math.isfinite(bce_loss([[1.0]], [[0.0]]))
    assert math.isfinite(bce_loss([[0.0]], [[1.0]]))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        bce_loss([[1.0, 0.0]], [[0.5]])


def test_tensor_inputs_stay_differentiable():
    y = torch.tensor([[1.0, 0.0]])
    logits = torch.tensor([[0.3, -0.2]], requires_grad=True)
    loss = bce_loss(y, torch.sigmoid(logits))
    assert torch.is_tensor(loss)
    loss.backward()
    assert logits.grad is not None
