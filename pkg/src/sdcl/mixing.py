"""Bidirectional copy-paste mixing of images and labels.

With mask ``M`` (1 outside the pasted block):

    x_in  = x_l_j * M + x_u_p * (1 - M)
    x_out = x_u_q * M + x_l_i * (1 - M)

and the same selection for labels, using teacher pseudo-labels on the
unlabeled side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MixError(ValueError):
    pass


@dataclass(frozen=True)
class MixedPair:
    x_in: np.ndarray
    x_out: np.ndarray
    y_in: np.ndarray
    y_out: np.ndarray
    mask: np.ndarray
    provenance: tuple[str, str, str, str]  # (l_i, l_j, u_p, u_q)

    def __post_init__(self):
        i, j, p, q = self.provenance
        if i == j or p == q:
            raise MixError(f"pairing requires i != j and p != q, got {self.provenance}")


def _spatial(a: np.ndarray) -> tuple[int, ...]:
    return a.shape[-3:]


def _check(mask: np.ndarray, arrays: dict[str, np.ndarray]) -> None:
    for name, a in arrays.items():
        if _spatial(a) != mask.shape[-3:]:
            raise MixError(f"{name} spatial shape {_spatial(a)} differs from mask shape {mask.shape[-3:]}")
    shapes = {a.shape for a in arrays.values()}
    if len(shapes) != 1:
        raise MixError(f"source shapes differ: {sorted(shapes)}")


def _select(keep: np.ndarray, where_one: np.ndarray, where_zero: np.ndarray) -> np.ndarray:
    # Pure selection (no arithmetic blending), so values are copied bit-exactly.
    return np.where(np.broadcast_to(keep, where_one.shape), where_one, where_zero)


def mix_images(x_l_j, x_u_p, x_u_q, x_l_i, mask):
    mask = np.asarray(mask)
    _check(mask, {"x_l_j": x_l_j, "x_u_p": x_u_p, "x_u_q": x_u_q, "x_l_i": x_l_i})
    keep = mask.astype(bool)
    return _select(keep, x_l_j, x_u_p), _select(keep, x_u_q, x_l_i)


def mix_labels(y_l_j, y_tilde_u_p, y_tilde_u_q, y_l_i, mask):
    mask = np.asarray(mask)
    _check(mask, {"y_l_j": y_l_j, "y_tilde_u_p": y_tilde_u_p, "y_tilde_u_q": y_tilde_u_q, "y_l_i": y_l_i})
    keep = mask.astype(bool)
    return _select(keep, y_l_j, y_tilde_u_p), _select(keep, y_tilde_u_q, y_l_i)


def mix_pair(x_l_i, x_l_j, x_u_p, x_u_q, y_l_i, y_l_j, y_tilde_u_p, y_tilde_u_q, mask, provenance) -> MixedPair:
    x_in, x_out = mix_images(x_l_j, x_u_p, x_u_q, x_l_i, mask)
    y_in, y_out = mix_labels(y_l_j, y_tilde_u_p, y_tilde_u_q, y_l_i, mask)
    return MixedPair(x_in, x_out, y_in, y_out, np.asarray(mask), tuple(provenance))
