"""Differentiable objectives for copy-paste training and discrepancy correction.

All functions take channel-softmaxed probabilities ``probs`` of shape
(B, K, W, H, D) as a :class:`~sdcl.tensor.Tensor`, integer labels of shape
(B, W, H, D) and {0,1} masks of shape (W, H, D) or (B, W, H, D).

Region weighting follows the copy-paste direction: for ``"in"`` the mask's
one-region (ground truth side) carries weight 1 and the zero-region
(pseudo-label side) carries ``alpha``; ``"out"`` swaps the roles.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
DICE_SMOOTH = 1e-5
GATE_EPS = 1e-8
DIRECTIONS = ("in", "out")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    gamma: float = 0.3
    mu: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "gamma", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def uniform_target(num_classes: int) -> np.ndarray:
    return np.full(num_classes, 1.0 / num_classes)


def one_hot(label: np.ndarray, num_classes: int) -> np.ndarray:
    """(B, W, H, D) integer labels -> (B, K, W, H, D) float indicators."""
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    classes = np.arange(num_classes).reshape((1, -1) + (1,) * (label.ndim - 1))
    return (label[:, None] == classes).astype(np.float64)


def _check(probs: Tensor, label: np.ndarray | None = None, *masks: np.ndarray) -> None:
    if probs.ndim != 5:
        raise ValueError(f"probs must be (B, K, W, H, D), got {probs.shape}")
    spatial = probs.shape[:1] + probs.shape[2:]
    if label is not None and np.shape(label) != spatial:
        raise ValueError(f"label shape {np.shape(label)} does not match probs {probs.shape}")
    for m in masks:
        m_shape = np.shape(m)
        if m_shape != spatial and m_shape != spatial[1:]:
            raise ValueError(f"mask shape {m_shape} does not match probs {probs.shape}")


def _broadcast_mask(mask: np.ndarray, probs: Tensor) -> np.ndarray:
    spatial = probs.shape[:1] + probs.shape[2:]
    return np.broadcast_to(np.asarray(mask, dtype=np.float64), spatial)


def region_weights(mask: np.ndarray, alpha: float, direction: str) -> tuple[np.ndarray, np.ndarray]:
    """(weight-1 region, alpha region) indicator arrays for a direction."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    m = np.asarray(mask, dtype=np.float64)
    return (m, 1.0 - m) if direction == "in" else (1.0 - m, m)


def ce_map(probs: Tensor, label: np.ndarray) -> Tensor:
    """Per-voxel cross-entropy -log p[label], shape (B, W, H, D)."""
    _check(probs, label)
    target = one_hot(label, probs.shape[1])
    picked = np.sum(probs.data * target, axis=1)
    if np.any(picked <= PROB_CLAMP):
        logger.debug("clamped %d target probabilities at %g", int(np.sum(picked <= PROB_CLAMP)), PROB_CLAMP)
    return -T.tsum(T.mul_mask(T.log(probs, clamp=PROB_CLAMP), target), axis=1)


def soft_dice_loss(probs: Tensor, label: np.ndarray, region: np.ndarray | None = None) -> Tensor:
    """Class-averaged soft Dice loss restricted to ``region``.

    Per class: 1 - (2 sum(p g) + s) / (sum(p^2) + sum(g) + s), s = 1e-5.
    """
    _check(probs, label)
    k = probs.shape[1]
    target = one_hot(label, k)
    r = np.ones(target.shape[:1] + target.shape[2:]) if region is None else _broadcast_mask(region, probs)
    r = r[:, None]
    axes = (0, 2, 3, 4)
    intersect = T.tsum(T.mul_mask(probs, target * r), axis=axes)
    p_sum = T.tsum(T.mul_mask(T.square(probs), np.broadcast_to(r, probs.shape)), axis=axes)
    g_sum = (target * r).sum(axis=axes)
    ratio = (intersect * 2.0 + DICE_SMOOTH) / (p_sum + T.Tensor(g_sum + DICE_SMOOTH))
    return 1.0 - T.tmean(ratio)


def region_seg_loss(probs: Tensor, label: np.ndarray, region: np.ndarray | None = None) -> Tensor | None:
    """0.5 * mean CE over the region + 0.5 * region-restricted soft Dice; None if the region is empty."""
    if region is None:
        count = float(np.prod(probs.shape[:1] + probs.shape[2:]))
        ce_total = T.tsum(ce_map(probs, label))
    else:
        r = _broadcast_mask(region, probs)
        count = float(r.sum())
        if count == 0:
            return None
        ce_total = T.tsum(T.mul_mask(ce_map(probs, label), r))
    return ce_total * (0.5 / count) + soft_dice_loss(probs, label, region) * 0.5


def seg_loss_map(probs: Tensor, label: np.ndarray, region: np.ndarray | None = None) -> Tensor:
    """Per-voxel 0.5*CE + 0.5*Dice, with the region-level Dice term spread evenly.

    The mean of this map over the region equals :func:`region_seg_loss`.
    """
    ce = ce_map(probs, label)
    dice = T.apply("broadcast", [soft_dice_loss(probs, label, region)], shape=ce.shape)
    return ce * 0.5 + dice * 0.5


def bcp_seg_loss(probs: Tensor, mix_label: np.ndarray, mask: np.ndarray, alpha: float, direction: str) -> Tensor:
    """RegionLoss(weight-1 region) + alpha * RegionLoss(alpha region)."""
    _check(probs, mix_label, mask)
    main, side = region_weights(mask, alpha, direction)
    total = T.Tensor(0.0)
    first = region_seg_loss(probs, mix_label, main)
    if first is not None:
        total = first
    second = region_seg_loss(probs, mix_label, side)
    if second is not None and alpha != 0:
        total = total + second * alpha
    return total


def squared_error_map(probs: Tensor, label: np.ndarray) -> Tensor:
    """Per-voxel sum over classes of (p_c - onehot_c)^2, shape (B, W, H, D)."""
    _check(probs, label)
    target = one_hot(label, probs.shape[1])
    return T.tsum(T.square(probs - T.Tensor(target)), axis=1)


def kl_uniform_map(probs: Tensor) -> Tensor:
    """Per-voxel KL(u || p) with u uniform over the K classes."""
    k = probs.shape[1]
    mean_log = T.tsum(T.log(probs, clamp=PROB_CLAMP), axis=1) * (1.0 / k)
    return -mean_log - math.log(k)


def _gated_mean(value_map: Tensor, mask: np.ndarray, gate: np.ndarray, alpha: float, direction: str) -> Tensor:
    main, side = region_weights(mask, alpha, direction)
    weights = np.broadcast_to(main + alpha * side, value_map.shape)
    g = np.broadcast_to(np.asarray(gate, dtype=np.float64), value_map.shape)
    return T.tsum(T.mul_mask(value_map, weights * g)) * (1.0 / (g.sum() + GATE_EPS))


def masked_mse_loss(
    probs: Tensor, mix_label: np.ndarray, mask: np.ndarray, m_diff: np.ndarray, alpha: float, direction: str
) -> Tensor:
    """Region-weighted squared error, gated by the discrepancy mask and normalised by its size."""
    _check(probs, mix_label, mask, m_diff)
    return _gated_mean(squared_error_map(probs, mix_label), mask, m_diff, alpha, direction)


def masked_kl_uniform_loss(
    probs: Tensor, mask: np.ndarray, m_differr: np.ndarray, alpha: float, direction: str, num_classes: int | None = None
) -> Tensor:
    """Region-weighted KL(u || p), gated by the discrepancy-error mask."""
    _check(probs, None, mask, m_differr)
    if num_classes is not None and num_classes != probs.shape[1]:
        raise ValueError(f"num_classes={num_classes} but probs have {probs.shape[1]} channels")
    return _gated_mean(kl_uniform_map(probs), mask, m_differr, alpha, direction)


def total_loss(seg_in, seg_out, mse_in, mse_out, kl_in, kl_out, gamma: float, mu: float):
    """seg_in + seg_out + gamma*(mse_in + mse_out) + mu*(kl_in + kl_out).

    Works on plain floats as well as tensors.
    """
    return seg_in + seg_out + (mse_in + mse_out) * gamma + (kl_in + kl_out) * mu


def entropy_map(probs: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(probs), PROB_CLAMP, None)
    return -(np.asarray(probs) * np.log(p)).sum(axis=1)
