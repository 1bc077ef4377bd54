import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import dice_loss_scalar
from translab.losses import (LossConfig, bce_loss, ce_loss, dice_loss, focal_loss,
                             total_loss)


def test_ce_uniform_logits():
    target = torch.randint(0, 3, (2, 5, 5))
    assert ce_loss(torch.zeros(2, 3, 5, 5), target).item() == pytest.approx(math.log(3))


def test_ce_large_margin_goes_to_zero():
    target = torch.randint(0, 3, (1, 4, 4))
    logits = torch.nn.functional.one_hot(target, 3).permute(0, 3, 1, 2).float() * 1e3
    assert ce_loss(logits, target).item() == pytest.approx(0.0, abs=1e-6)


def test_ce_matches_enumeration():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(1, 3, 2, 2, generator=g, dtype=torch.float64)
    target = torch.tensor([[[0, 2], [1, 1]]])
    terms = []
    for y in range(2):
        for x in range(2):
            z = logits[0, :, y, x].tolist()
            terms.append(-(z[target[0, y, x]] - math.log(sum(math.exp(v) for v in z))))
    assert ce_loss(logits, target).item() == pytest.approx(sum(terms) / 4, rel=1e-12)


def test_ce_shape_mismatch():
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 5, 4, dtype=torch.long))


def test_dice_perfect_and_empty_prediction():
    g = torch.zeros(1, 1, 4, 4)
    g[0, 0, 1:3, 1:3] = 1
    assert dice_loss(g.clone(), g).item() == pytest.approx(0.0, abs=1e-7)
    assert dice_loss(torch.zeros_like(g), g, eps=0.0).item() == pytest.approx(1.0)
    both_empty = torch.zeros(1, 1, 4, 4)
    assert dice_loss(both_empty, both_empty).item() == 0.0


def test_dice_worked_example():
    s = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    g = torch.zeros_like(s)
    g[0, 0, 0, 0] = 1
    # unsmoothed: 2*0.5 / (4*0.25 + 1)
    assert dice_loss(s, g, eps=0.0).item() == pytest.approx(0.5)
    # smoothed default eps=1: (1 + 1) / (2 + 1)
    assert dice_loss(s, g).item() == pytest.approx(1 - 2 / 3)
    assert dice_loss(s, g).item() == pytest.approx(dice_loss_scalar(s, g, 1.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_bounded_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    s = torch.from_numpy(rng.random((1, 1, 6, 6)))
    g = torch.from_numpy((rng.random((1, 1, 6, 6)) < 0.3).astype(float))
    value = dice_loss(s, g).item()
    assert 0 <= value <= 1
    perm = torch.from_numpy(rng.permutation(36))
    sp = s.flatten()[perm].view_as(s)
    gp = g.flatten()[perm].view_as(g)
    assert dice_loss(sp, gp).item() == pytest.approx(value, rel=1e-12)


def test_dice_gradient_finite_differences():
    rng = np.random.default_rng(1)
    s = torch.from_numpy(rng.random((1, 1, 8, 8))).requires_grad_(True)
    g = torch.from_numpy((rng.random((1, 1, 8, 8)) < 0.3).astype(float))
    dice_loss(s, g).backward()
    h = 1e-4
    base = s.detach().numpy().copy()
    for idx in [(0, 0, 0, 0), (0, 0, 3, 5), (0, 0, 7, 7)]:
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        fd = (dice_loss_scalar(plus, g, 1.0) - dice_loss_scalar(minus, g, 1.0)) / (2 * h)
        assert s.grad[idx].item() == pytest.approx(fd, rel=1e-6)


def test_bce_and_focal_closed_form():
    z = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    gt = torch.ones_like(z)
    assert bce_loss(z, gt).item() == pytest.approx(math.log(2))
    assert focal_loss(z, gt, gamma=2, alpha=1.0).item() == pytest.approx(0.25 * math.log(2))
    # alpha weights positives by alpha, negatives by 1 - alpha
    assert focal_loss(z, gt, gamma=2, alpha=0.25).item() == pytest.approx(0.0625 * math.log(2))
    assert focal_loss(z, 1 - gt, gamma=2, alpha=0.25).item() == \
        pytest.approx(0.75 * 0.25 * math.log(2))


def test_perfect_logits_give_zero_boundary_losses():
    gt = (torch.rand(1, 1, 5, 5) > 0.5).float()
    logits = (gt * 2 - 1) * 100
    assert bce_loss(logits, gt).item() == pytest.approx(0.0, abs=1e-12)
    assert focal_loss(logits, gt).item() == pytest.approx(0.0, abs=1e-12)


def test_focal_gamma_zero_reduces_to_bce():
    g = torch.Generator().manual_seed(3)
    for _ in range(10):
        z = torch.randn(2, 1, 6, 6, generator=g, dtype=torch.float64) * 3
        gt = (torch.rand(2, 1, 6, 6, generator=g) > 0.6).double()
        assert focal_loss(z, gt, gamma=0.0, alpha=None).item() == \
            pytest.approx(bce_loss(z, gt).item(), abs=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 5, 4))


def test_total_loss_combination():
    seg = torch.randn(1, 3, 4, 4)
    mask = torch.randint(0, 3, (1, 4, 4))
    b_logits = torch.randn(1, 1, 4, 4)
    b_gt = (torch.rand(1, 1, 4, 4) > 0.5).float()
    cfg = LossConfig()
    assert cfg.lam == 5.0 and cfg.boundary_loss == "dice"
    loss, parts = total_loss(seg, b_logits, mask, b_gt, cfg)
    assert loss.item() == pytest.approx(parts["loss_seg"] + 5 * parts["loss_boundary"], rel=1e-6)

    none_loss, parts = total_loss(seg, None, mask, None, LossConfig(boundary_loss="none"))
    assert none_loss.item() == ce_loss(seg, mask).item() and parts["loss_boundary"] == 0.0

    zero_lam, _ = total_loss(seg, b_logits, mask, b_gt, LossConfig(lam=0.0))
    assert zero_lam.item() == ce_loss(seg, mask).item()


def test_total_loss_worked_example():
    from translab.losses import combine
    assert combine(0.7, 0.1, 5.0) == pytest.approx(1.2)


def test_total_loss_linear_in_boundary_term():
    from translab.losses import combine
    for lb in (0.0, 0.3, 1.7):
        assert combine(0.4, lb, 5.0) - combine(0.4, 0.0, 5.0) == pytest.approx(5.0 * lb)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(boundary_loss="lovasz")
    with pytest.raises(ValueError):
        LossConfig(lam=-1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["bce", "focal", "dice"]))
def test_losses_nonnegative_and_finite(seed, kind):
    g = torch.Generator().manual_seed(seed)
    seg = torch.randn(2, 3, 8, 8, generator=g) * 5
    mask = torch.randint(0, 3, (2, 8, 8), generator=g)
    b = torch.randn(2, 1, 8, 8, generator=g) * 5
    gt = (torch.rand(2, 1, 8, 8, generator=g) > 0.7).float()
    loss, parts = total_loss(seg, b, mask, gt, LossConfig(boundary_loss=kind))
    assert torch.isfinite(loss) and loss.item() >= 0
    assert parts["loss_seg"] >= 0 and parts["loss_boundary"] >= 0
