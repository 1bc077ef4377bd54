"""Segmentation and boundary losses, combined as ``L = L_s + lambda * L_b``."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

BOUNDARY_LOSSES = ("none", "bce", "focal", "dice")


@dataclass
class LossConfig:
    lam: float = 5.0
    boundary_loss: str = "dice"
    focal_gamma: float = 2.0
    focal_alpha: float | None = 0.25
    dice_eps: float = 1.0

    def __post_init__(self):
        if self.boundary_loss not in BOUNDARY_LOSSES:
            raise ValueError(f"boundary_loss must be one of {BOUNDARY_LOSSES}, "
                             f"got {self.boundary_loss!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")

    def to_dict(self):
        return asdict(self)


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def ce_loss(seg_logits, target):
    """Mean per-pixel cross-entropy over all pixels, background included."""
    if seg_logits.dim() != target.dim() + 1 or seg_logits.shape[-2:] != target.shape[-2:] \
            or seg_logits.shape[0] != target.shape[0]:
        raise ValueError(f"ce_loss: logits {tuple(seg_logits.shape)} do not match "
                         f"target {tuple(target.shape)}")
    return F.cross_entropy(seg_logits, target.long())


def dice_loss(boundary_prob, boundary_gt, eps=1.0):
    """``1 - D`` with ``D = (2 sum(S*G) + eps) / (sum(S^2) + sum(G^2) + eps)``.

    Sums run over each sample (all dims but the first); the result is the
    batch mean. ``eps`` makes the empty-vs-empty case a perfect score.
    """
    _check_shapes(boundary_prob, boundary_gt, "dice_loss")
    s = boundary_prob.flatten(1)
    g = boundary_gt.to(s.dtype).flatten(1)
    dice = (2 * (s * g).sum(1) + eps) / ((s * s).sum(1) + (g * g).sum(1) + eps)
    return (1 - dice).mean()


def bce_loss(boundary_logits, boundary_gt):
    _check_shapes(boundary_logits, boundary_gt, "bce_loss")
    return F.binary_cross_entropy_with_logits(boundary_logits, boundary_gt.to(boundary_logits.dtype))


def focal_loss(boundary_logits, boundary_gt, gamma=2.0, alpha=0.25):
    """Mean of ``alpha_t * (1 - p_t)**gamma * BCE``; ``alpha=None`` disables weighting."""
    _check_shapes(boundary_logits, boundary_gt, "focal_loss")
    gt = boundary_gt.to(boundary_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(boundary_logits, gt, reduction="none")
    p = torch.sigmoid(boundary_logits)
    p_t = p * gt + (1 - p) * (1 - gt)
    loss = bce if gamma == 0 else (1 - p_t) ** gamma * bce
    if alpha is not None:
        loss = (alpha * gt + (1 - alpha) * (1 - gt)) * loss
    return loss.mean()


def boundary_term(boundary_logits, boundary_gt, config):
    kind = config.boundary_loss
    if kind == "dice":
        return dice_loss(torch.sigmoid(boundary_logits), boundary_gt, config.dice_eps)
    if kind == "bce":
        return bce_loss(boundary_logits, boundary_gt)
    if kind == "focal":
        return focal_loss(boundary_logits, boundary_gt, config.focal_gamma, config.focal_alpha)
    raise ValueError(f"no boundary term for boundary_loss={kind!r}")


def combine(loss_seg, loss_boundary, lam):
    return loss_seg + lam * loss_boundary


def total_loss(seg_logits, boundary_logits, mask, boundary_gt, config):
    """Return ``(L, breakdown)``; breakdown holds floats for logging."""
    loss_seg = ce_loss(seg_logits, mask)
    if config.boundary_loss == "none":
        return loss_seg, {"loss": loss_seg.item(), "loss_seg": loss_seg.item(),
                          "loss_boundary": 0.0}
    if boundary_logits is None:
        raise ValueError(f"boundary_loss={config.boundary_loss!r} needs boundary logits; "
                         "enable the boundary stream")
    loss_b = boundary_term(boundary_logits, boundary_gt, config)
    loss = combine(loss_seg, loss_b, config.lam)
    return loss, {"loss": loss.item(), "loss_seg": loss_seg.item(),
                  "loss_boundary": loss_b.item()}
