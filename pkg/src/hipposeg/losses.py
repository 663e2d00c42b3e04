"""Overlap and boundary-distance losses for two-class segmentation.

All losses are differentiable in the prediction when given torch tensors;
they also accept numpy arrays for plain metric evaluation. Two-channel
inputs are ordered (background, foreground): channel 1 is foreground.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

FOREGROUND_CHANNEL = 1


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def _shapes_match(p, g) -> None:
    if tuple(p.shape) != tuple(g.shape):
        raise ValueError(f"shape mismatch: prediction {tuple(p.shape)} vs target {tuple(g.shape)}")


def dice_coefficient(p, g):
    """2*sum(p*g) / (sum(p^2) + sum(g^2)), summed over all elements.

    Equals 2|P∩G|/(|P|+|G|) for binary inputs. Two empty inputs score 1
    (perfect agreement convention).
    """
    _shapes_match(p, g)
    if not _is_torch(p):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        denom = float((p * p).sum() + (g * g).sum())
        if denom == 0.0:
            return 1.0
        return float(2.0 * (p * g).sum() / denom)
    g = g.to(p.dtype)
    denom = (p * p).sum() + (g * g).sum()
    if float(denom.detach()) == 0.0:
        return torch.ones((), dtype=p.dtype, device=p.device)
    return 2.0 * (p * g).sum() / denom


def dice_loss(p, g):
    """1 - dice_coefficient; the single-channel overlap loss."""
    return 1.0 - dice_coefficient(p, g)


def _class_axis(t) -> int:
    # (2, H, W) single sample or (B, 2, H, W) batch
    if t.ndim == 3:
        return 0
    if t.ndim == 4:
        return 1
    raise ValueError(f"expected (2,H,W) or (B,2,H,W), got shape {tuple(t.shape)}")


def _check_one_hot(g, axis: int) -> None:
    if g.shape[axis] != 2:
        raise ValueError(f"expected 2 channels on axis {axis}, got {g.shape[axis]}")
    binary = bool(((g == 0) | (g == 1)).all())
    sums_to_one = bool((g.sum(axis) == 1).all())
    if not (binary and sums_to_one):
        raise ValueError("target must be one-hot over (background, foreground)")


def generalized_dice_loss(p, g, eps: float = 1e-6):
    """Two-class Dice loss with inverse-squared class-volume weights.

    w_l = 1 / (sum_i g_li + eps)^2,
    GDL = 1 - 2 * sum_l w_l sum_i p_li g_li / sum_l w_l sum_i (p_li + g_li).
    The eps stabilizes the weight of an absent class.
    """
    _shapes_match(p, g)
    axis = _class_axis(p)
    _check_one_hot(g, axis)
    if not _is_torch(p):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
    else:
        g = g.to(p.dtype)
    sum_axes = tuple(d for d in range(p.ndim) if d != axis)
    g_volume = g.sum(sum_axes)
    w = 1.0 / (g_volume + eps) ** 2
    intersect = (w * (p * g).sum(sum_axes)).sum()
    total = (w * (p + g).sum(sum_axes)).sum()
    out = 1.0 - 2.0 * intersect / total
    return out if _is_torch(out) else float(out)


@dataclass(frozen=True)
class DistanceMap:
    """Signed Euclidean distance to the mask boundary, negative inside.

    from_border is set when the mask had no boundary pixels (all-empty or
    all-full) and distances were measured from the patch border instead.
    """

    phi: np.ndarray
    from_border: bool = False


def _border_distance(shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    i = np.arange(h, dtype=np.float64)[:, None]
    j = np.arange(w, dtype=np.float64)[None, :]
    return np.broadcast_to(
        np.minimum(np.minimum(i + 1, h - i), np.minimum(j + 1, w - j)), (h, w)
    ).copy()


def boundary_pixels(g: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one in-grid background 4-neighbor."""
    g = np.asarray(g).astype(bool)
    interior = ndimage.binary_erosion(g, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=1)
    return g & ~interior


def signed_distance_map(g: np.ndarray) -> DistanceMap:
    """Exact signed Euclidean distance transform of a binary 2D mask.

    phi is 0 on boundary pixels (foreground 4-adjacent to background),
    negative strictly inside the mask, positive outside. Masks with no
    boundary (empty or full) fall back to distance from the patch border,
    positive when empty and negative when full, flagged via from_border.
    """
    g = np.asarray(g)
    if g.ndim != 2:
        raise ValueError(f"signed_distance_map expects a 2D mask, got shape {g.shape}")
    if not np.isin(np.unique(g), [0, 1]).all():
        raise ValueError("mask values must be 0 or 1")
    fg = g.astype(bool)
    n_fg = int(fg.sum())
    if n_fg == 0:
        return DistanceMap(_border_distance(fg.shape), from_border=True)
    if n_fg == fg.size:
        return DistanceMap(-_border_distance(fg.shape), from_border=True)
    border = boundary_pixels(fg)
    dist = ndimage.distance_transform_edt(~border)
    phi = np.where(fg, -dist, dist)
    return DistanceMap(phi, from_border=False)


@dataclass(frozen=True)
class BoundarySchedule:
    """Linear epoch schedule for the regional/surface blend weight.

    alpha runs from 1 at epoch 0 to 0 at epoch max_epochs-1 (clamped for
    epochs past the horizon). Epochs are 0-based here.
    """

    epoch: int
    max_epochs: int

    def __post_init__(self):
        if self.max_epochs < 2:
            raise ValueError(f"max_epochs must be >= 2, got {self.max_epochs}")
        if self.epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {self.epoch}")

    @property
    def alpha(self) -> float:
        a = 1.0 - self.epoch / (self.max_epochs - 1)
        return min(1.0, max(0.0, a))


def surface_term(p, phi):
    """Mean over pixels of phi * p_foreground."""
    axis = _class_axis(p)
    p_fg = p[FOREGROUND_CHANNEL] if axis == 0 else p[:, FOREGROUND_CHANNEL]
    if _is_torch(p):
        if not _is_torch(phi):
            phi = torch.as_tensor(phi, dtype=p.dtype, device=p.device)
        return (phi * p_fg).mean()
    return float((np.asarray(phi) * np.asarray(p_fg, dtype=np.float64)).mean())


def distance_maps_for(g) -> np.ndarray:
    """Stack signed distance maps for a one-hot target (single or batch)."""
    g_np = g.detach().cpu().numpy() if _is_torch(g) else np.asarray(g)
    axis = _class_axis(g_np)
    fg = g_np[FOREGROUND_CHANNEL] if axis == 0 else g_np[:, FOREGROUND_CHANNEL]
    if fg.ndim == 2:
        return signed_distance_map(fg).phi
    return np.stack([signed_distance_map(f).phi for f in fg], axis=0)


def boundary_loss(p, g, schedule: BoundarySchedule, phi=None):
    """alpha * GDL + (1 - alpha) * surface term, alpha per the epoch schedule.

    phi may be precomputed (e.g. by a data loader); otherwise it is derived
    from the target's foreground channel.
    """
    gdl = generalized_dice_loss(p, g)
    if phi is None:
        phi = distance_maps_for(g)
    s = surface_term(p, phi)
    a = schedule.alpha
    return a * gdl + (1.0 - a) * s
