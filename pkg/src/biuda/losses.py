"""Differentiable training objectives.

All losses return scalar torch tensors and work in float32 or float64. Each
has an exact element-loop oracle in the test suite; keep the formulas here in
one obvious place so the oracles stay trivially comparable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import NumericalError

DICE_EPS = 1e-5
LOG_EPS = 1e-8


@dataclass
class LossWeights:
    cpc: float = 0.01
    lc: float = 1.0
    cycle: float = 0.5
    gan: float = 0.01
    dice_eps: float = DICE_EPS
    log_eps: float = LOG_EPS

    def validate(self) -> None:
        for name in ("cpc", "lc", "cycle", "gan"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class LossReport:
    """Named scalar terms of one training step; inactive terms stay at 0."""

    cpc_s: float = 0.0
    cpc_t: float = 0.0
    lc: float = 0.0
    cycle_s: float = 0.0
    cycle_t: float = 0.0
    gan_s2t: float = 0.0
    gan_t2s: float = 0.0
    total: float = 0.0
    d_loss: Optional[float] = None

    FIELDS = ("cpc_s", "cpc_t", "lc", "cycle_s", "cycle_t", "gan_s2t", "gan_t2s", "total", "d_loss")


def _check_same_shape(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def cpc_loss(
    content: torch.Tensor,
    content_recon: torch.Tensor,
    pattern: torch.Tensor,
    pattern_recon: torch.Tensor,
) -> torch.Tensor:
    """Mean absolute drift of content and pattern codes across reconstruction."""
    _check_same_shape("content codes", content, content_recon)
    _check_same_shape("pattern codes", pattern, pattern_recon)
    return (content_recon - content).abs().mean() + (pattern_recon - pattern).abs().mean()


def seg_loss(
    target_onehot: torch.Tensor,
    probs: torch.Tensor,
    dice_eps: float = DICE_EPS,
    log_eps: float = LOG_EPS,
    strict: bool = False,
) -> torch.Tensor:
    """Cross-entropy plus (1 - smoothed soft Dice).

    The cross-entropy term averages over all locations *and* channels, and the
    Dice ratio is pooled per class over every remaining axis, then averaged
    over classes. Inputs are (K, H, W) or (B, K, H, W).
    """
    _check_same_shape("segmentation", target_onehot, probs)
    if target_onehot.dim() == 3:
        a = target_onehot.unsqueeze(0)
        m = probs.unsqueeze(0)
    elif target_onehot.dim() == 4:
        a, m = target_onehot, probs
    else:
        raise ValueError(f"expected 3D or 4D inputs, got {target_onehot.dim()}D")
    if strict:
        sums = m.sum(dim=1)
        if (sums - 1.0).abs().max() > 1e-4:
            raise ValueError("probability maps do not sum to 1 per pixel")
    ce = -(a * torch.log(m.clamp_min(log_eps))).sum() / m.numel()
    inter = (a * m).sum(dim=(0, 2, 3))
    denom = (a * a).sum(dim=(0, 2, 3)) + (m * m).sum(dim=(0, 2, 3))
    dice = (2.0 * inter + dice_eps) / (denom + dice_eps)
    return ce + (1.0 - dice.mean())


def seg_loss_unnormalized(target_onehot: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Reference form summing the per-element Dice ratio without normalization.

    Grows with image size and divides by zero wherever target and prediction
    are both zero, so it is kept only for documentation and tiny-input tests;
    training uses :func:`seg_loss`.
    """
    _check_same_shape("segmentation", target_onehot, probs)
    a, m = target_onehot, probs
    n = m.numel()
    ce = -(a * torch.log(m.clamp_min(LOG_EPS))).sum() / n
    dice_sum = (2.0 * a * m / (a * a + m * m)).sum()
    return 1.0 + ce - dice_sum


def lc_loss(
    target_onehot: torch.Tensor,
    probs_direct: torch.Tensor,
    probs_translated: torch.Tensor,
    dice_eps: float = DICE_EPS,
    log_eps: float = LOG_EPS,
) -> torch.Tensor:
    """Supervise the direct segmentation and the re-encoded translation alike."""
    return seg_loss(target_onehot, probs_direct, dice_eps, log_eps) + seg_loss(
        target_onehot, probs_translated, dice_eps, log_eps
    )


def cycle_loss(x: torch.Tensor, x_recon: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference between an image and its reconstruction."""
    _check_same_shape("cycle", x, x_recon)
    return (x_recon - x).abs().mean()


def _check_scores(name: str, scores: torch.Tensor) -> None:
    if scores.numel() == 0:
        raise ValueError(f"{name}: empty score tensor")
    if scores.min() <= 0.0 or scores.max() >= 1.0:
        raise ValueError(f"{name}: scores must lie strictly inside (0, 1)")


def gan_loss_d(
    real_scores: torch.Tensor,
    fake_scores: torch.Tensor,
    log_eps: float = LOG_EPS,
) -> torch.Tensor:
    """Discriminator objective: push real scores to 1 and fake scores to 0."""
    _check_scores("real_scores", real_scores)
    _check_scores("fake_scores", fake_scores)
    real_term = torch.log(real_scores.clamp_min(log_eps)).mean()
    fake_term = torch.log((1.0 - fake_scores).clamp_min(log_eps)).mean()
    return -(real_term + fake_term)


def gan_loss_g(fake_scores: torch.Tensor, log_eps: float = LOG_EPS) -> torch.Tensor:
    """Non-saturating generator objective: push fake scores toward 1."""
    _check_scores("fake_scores", fake_scores)
    return -torch.log(fake_scores.clamp_min(log_eps)).mean()


@dataclass
class LossParts:
    """Unweighted terms entering the weighted total objective."""

    cpc_s: torch.Tensor | float = 0.0
    cpc_t: torch.Tensor | float = 0.0
    lc: torch.Tensor | float = 0.0
    cycle_s: torch.Tensor | float = 0.0
    cycle_t: torch.Tensor | float = 0.0
    gan_s2t: torch.Tensor | float = 0.0
    gan_t2s: torch.Tensor | float = 0.0

    def named(self):
        return (
            ("cpc_s", self.cpc_s),
            ("cpc_t", self.cpc_t),
            ("lc", self.lc),
            ("cycle_s", self.cycle_s),
            ("cycle_t", self.cycle_t),
            ("gan_s2t", self.gan_s2t),
            ("gan_t2s", self.gan_t2s),
        )


def total_loss(parts: LossParts, weights: LossWeights) -> torch.Tensor:
    """Weighted summation of the consistency, supervision, cycle, and GAN terms."""
    for name, value in parts.named():
        v = value if isinstance(value, torch.Tensor) else torch.as_tensor(float(value))
        if not torch.isfinite(v).all():
            raise NumericalError(f"loss term {name} is not finite")
    result = (
        weights.cpc * (parts.cpc_s + parts.cpc_t)
        + weights.lc * parts.lc
        + weights.cycle * (parts.cycle_s + parts.cycle_t)
        + weights.gan * (parts.gan_s2t + parts.gan_t2s)
    )
    if not isinstance(result, torch.Tensor):
        result = torch.as_tensor(result, dtype=torch.get_default_dtype())
    return result


def one_hot(labels: torch.Tensor, num_classes: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(B, H, W) integer labels to (B, K, H, W) one-hot."""
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    oh = torch.nn.functional.one_hot(labels.long(), num_classes)
    return oh.permute(0, 3, 1, 2).to(dtype)
