"""Binary masks for copy-paste mixing and discrepancy correction.

Conventions: masks are ``uint8`` arrays of shape (W, H, D) (or with a leading
batch axis) holding exactly 0 or 1.  In the copy-paste mask the pasted block
is the zero region.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)


class MaskError(ValueError):
    pass


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def block_extents(shape: tuple[int, ...], beta: float) -> tuple[int, ...]:
    return tuple(round_half_away(beta * n) for n in shape)


def gen_copy_paste_mask(
    shape: tuple[int, int, int],
    beta: float,
    rng: np.random.Generator | None = None,
    centered: bool = False,
) -> np.ndarray:
    """Ones everywhere except one axis-aligned zero block of extent round(beta*dim).

    The block corner is drawn uniformly over all fully-contained positions
    (or placed at the exact center when ``centered``).
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or any(n <= 0 for n in shape):
        raise MaskError(f"mask shape must be three positive extents, got {shape}")
    if not 0.0 < beta < 1.0:
        raise MaskError(f"beta must lie in (0, 1), got {beta}")
    extents = block_extents(shape, beta)
    for n, e in zip(shape, extents):
        if not 1 <= e <= n:
            raise MaskError(f"block extent round({beta}*{n})={e} outside [1, {n}]")
    if centered:
        corner = tuple((n - e) // 2 for n, e in zip(shape, extents))
    else:
        if rng is None:
            raise MaskError("random placement needs an rng")
        corner = tuple(int(rng.integers(0, n - e + 1)) for n, e in zip(shape, extents))
    mask = np.ones(shape, dtype=np.uint8)
    mask[tuple(slice(c, c + e) for c, e in zip(corner, extents))] = 0
    return mask


def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise MaskError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def diff_mask(pred_a: np.ndarray, pred_b: np.ndarray) -> np.ndarray:
    """1 where the two hard predictions disagree (XOR for binary labels)."""
    _check_pair(pred_a, pred_b, "diff_mask")
    return (np.asarray(pred_a) != np.asarray(pred_b)).astype(np.uint8)


def err_mask(pred: np.ndarray, mix_label: np.ndarray) -> np.ndarray:
    """1 where the prediction disagrees with the mixed label."""
    _check_pair(pred, mix_label, "err_mask")
    return (np.asarray(pred) != np.asarray(mix_label)).astype(np.uint8)


def differr_mask(m_diff: np.ndarray, m_err: np.ndarray) -> np.ndarray:
    _check_pair(m_diff, m_err, "differr_mask")
    return (np.asarray(m_diff, dtype=np.uint8) & np.asarray(m_err, dtype=np.uint8)).astype(np.uint8)


def _structure(shape: tuple[int, ...]) -> np.ndarray:
    # 26-connectivity; on a depth-1 volume this is 8-connectivity in the plane.
    return np.ones((3,) * len(shape), dtype=bool)


def largest_connected_component(raw: np.ndarray, num_classes: int) -> np.ndarray:
    """Keep, per foreground class, only its largest connected component.

    Demoted voxels become background 0.  Ties go to the component whose first
    voxel comes first in C (lexicographic) order.  Accepts a single volume
    (W, H, D) or a batch (B, W, H, D); batches are refined per volume.
    """
    raw = np.asarray(raw)
    if raw.ndim == 4:
        return np.stack([largest_connected_component(v, num_classes) for v in raw])
    if raw.size and (raw.min() < 0 or raw.max() >= num_classes):
        raise MaskError(f"labels must lie in [0, {num_classes}), got range [{raw.min()}, {raw.max()}]")
    out = raw.copy()
    structure = _structure(raw.shape)
    for c in range(1, num_classes):
        region = raw == c
        if not region.any():
            continue
        labels, n = ndimage.label(region, structure=structure)
        if n <= 1:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        # ndimage.label numbers components in raster order of their first voxel,
        # so argmax's first-max rule implements the lexicographic tie-break.
        keep = int(np.argmax(sizes)) + 1
        out[region & (labels != keep)] = 0
    return out


def mask_stats(mask: np.ndarray) -> dict[str, float]:
    mask = np.asarray(mask)
    return {"ones": int(mask.sum()), "size": int(mask.size), "fraction": float(mask.mean()) if mask.size else 0.0}
