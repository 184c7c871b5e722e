import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relmap import tensor as T
from relmap.objectives import (
    LossBreakdown,
    LossWeights,
    loss_bg,
    loss_ce_ground_truth,
    loss_confidence,
    loss_fg,
    loss_gradmask,
    loss_relevance,
    loss_rrr,
    loss_total,
    patch_mask_from_pixels,
    predicted_class,
)
from relmap.tensor import ContractError, DimensionError

R_HAND = np.array([[1.0, 0.2], [0.4, 0.0]])
S_HAND = np.array([[1.0, 0.0], [0.0, 0.0]])


def test_patch_mask():
    assert np.all(patch_mask_from_pixels(np.ones((8, 8)), 4) == 1)
    m = np.zeros((4, 4))
    m[:2, :1] = 1
    assert patch_mask_from_pixels(m, 2)[0, 0] == 0.5
    with pytest.raises(DimensionError):
        patch_mask_from_pixels(np.ones((6, 6)), 4)


def test_patch_mask_counting_oracle(rng):
    m = rng.integers(0, 2, size=(32, 32))
    pm = patch_mask_from_pixels(m, 8)
    for i in range(4):
        for j in range(4):
            count = sum(m[y, x] for y in range(i * 8, i * 8 + 8) for x in range(j * 8, j * 8 + 8))
            assert pm[i, j] == pytest.approx(count / 64)
    assert np.allclose(pm + (1 - pm), 1)


def test_hand_losses():
    r = T.tensor(R_HAND)
    assert loss_bg(r, S_HAND).item() == pytest.approx(0.05, abs=1e-6)
    assert loss_fg(r, S_HAND).item() == pytest.approx(0.75, abs=1e-6)
    assert loss_relevance(0.05, 0.75) == pytest.approx(0.325, abs=1e-6)
    assert loss_total(0.325, math.log(2)) == pytest.approx(0.3986, abs=1e-4)
    assert loss_total(0.325, math.log(2)) == pytest.approx(0.8 * 0.325 + 0.2 * math.log(2), abs=1e-12)


def test_loss_limits():
    r = T.tensor(R_HAND)
    assert loss_bg(T.tensor(R_HAND * S_HAND), S_HAND).item() == 0
    assert loss_bg(r, np.ones((2, 2))).item() == 0
    assert loss_fg(T.tensor(np.ones((2, 2))), np.ones((2, 2))).item() == 0
    assert loss_relevance(0.0, 0.0) == 0
    assert loss_relevance(0.05, 0.75, LossWeights(fg=0)) == pytest.approx(2 * 0.05)
    assert loss_total(0.0, 0.0) == 0
    assert loss_total(0.5, 1.0, LossWeights(classification=0)) == pytest.approx(0.4)


def test_grid_mismatch():
    with pytest.raises(DimensionError):
        loss_bg(T.tensor(np.ones((2, 2))), np.ones((3, 3)))
    with pytest.raises(DimensionError):
        loss_fg(T.tensor(np.ones((2, 2))), np.ones((3, 3)))


def test_fg_gradient_zero_on_background():
    r = T.tensor(R_HAND, requires_grad=True)
    (g,) = T.grad(loss_fg(r, S_HAND), [r])
    assert np.all(g.data[S_HAND == 0] == 0)
    assert g.data[0, 0] == 0  # R already equals its target there


def test_negative_weight_rejected():
    with pytest.raises(ContractError):
        LossWeights(bg=-1)


def test_confidence_loss():
    assert loss_confidence(T.tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-6)
    assert loss_confidence(T.tensor([2.0, 0.0])).item() == pytest.approx(0.1269, abs=1e-4)
    assert loss_confidence(T.tensor([2.0, 0.0])).item() == pytest.approx(-math.log(math.e**2 / (math.e**2 + 1)), abs=1e-6)
    assert loss_confidence(T.tensor([100.0, 0.0])).item() < 1e-6
    assert predicted_class(np.array([1.0, 3.0, 3.0])) == 1


def test_ce_ground_truth():
    assert loss_ce_ground_truth(T.tensor(np.zeros(8)), 3).item() == pytest.approx(math.log(8), abs=1e-6)
    assert loss_ce_ground_truth(T.tensor([2.0, 0.0]), 0).item() == pytest.approx(0.1269, abs=1e-4)
    assert loss_ce_ground_truth(T.tensor([2.0, 0.0]), 1).item() == pytest.approx(2.1269, abs=1e-4)
    with pytest.raises(ContractError):
        loss_ce_ground_truth(T.tensor([2.0, 0.0]), 2)


def test_confidence_target_is_stopped():
    # gradient equals softmax - onehot(argmax), with no term from the argmax choice
    z = T.tensor([1.0, 2.0, 0.5], requires_grad=True)
    (g,) = T.grad(loss_confidence(z), [z])
    p = np.exp(z.data) / np.exp(z.data).sum()
    assert np.allclose(g.data, p - np.eye(3)[1], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-30, 30)))
def test_confidence_nonnegative(z):
    assert loss_confidence(T.tensor(z)).item() >= -1e-7


def test_baseline_hand_cases():
    grad = T.tensor(np.ones((2, 2, 1)))
    mask = np.array([[1, 0], [0, 0]])
    assert loss_gradmask(grad, mask).item() == pytest.approx(math.sqrt(3), abs=1e-6)
    assert loss_rrr(grad, mask).item() == pytest.approx(3.0, abs=1e-6)


def test_baseline_limits(rng):
    mask = rng.integers(0, 2, size=(4, 4))
    zero = T.tensor(np.zeros((4, 4, 3)))
    assert loss_gradmask(zero, mask).item() == 0
    assert loss_rrr(zero, mask).item() == 0
    g = rng.normal(size=(4, 4, 3))
    assert loss_gradmask(T.tensor(g), np.ones((4, 4))).item() == 0
    base = loss_rrr(T.tensor(g), mask).item()
    assert loss_rrr(T.tensor(2.5 * g), mask).item() == pytest.approx(6.25 * base, rel=1e-5)
    with pytest.raises(DimensionError):
        loss_gradmask(T.tensor(g), np.ones((3, 3)))


def test_baselines_ignore_foreground_gradient(rng):
    mask = rng.integers(0, 2, size=(4, 4))
    g = rng.normal(size=(4, 4, 3))
    h = g.copy()
    h[mask == 1] = rng.normal(size=h[mask == 1].shape)
    assert loss_gradmask(T.tensor(g), mask).item() == loss_gradmask(T.tensor(h), mask).item()
    assert loss_rrr(T.tensor(g), mask).item() == loss_rrr(T.tensor(h), mask).item()


def test_gradmask_gradient_finite_at_zero():
    g = T.tensor(np.zeros((2, 2, 3)), requires_grad=True)
    (d,) = T.grad(loss_gradmask(g, np.zeros((2, 2))), [g])
    assert np.all(np.isfinite(d.data))


def test_breakdown_dict():
    bd = LossBreakdown(bg=0.05, fg=0.75, relevance=0.325)
    d = bd.to_dict()
    assert "rrr" not in d and d["relevance"] == 0.325
