"""Random patch extraction with positive/negative balancing and augmentation.

Patches are sampled at runtime, never cached: positive patches center on a
mask border voxel of the configured orientation's slices, negative patches
on a brain voxel (by default restricted to slices that contain mask). The
input is the 3-channel slice triplet cropped to the patch window with
zero padding; the target is the center slice's mask patch.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .volumes import (
    LabelMask,
    ORIENTATION_AXIS,
    SlicePlane,
    Volume,
    extract_slice_triplet,
)

DEFAULT_EPOCH_SIZES = {"sagittal": 5000, "coronal": 4000, "axial": 3000}
NEGATIVE_SLICE_POLICIES = ("hippocampus", "all")


@dataclass(frozen=True)
class AugmentConfig:
    """Runtime augmentation ranges applied to sampled patches."""

    intensity_shift_range: tuple[float, float] = (-0.05, 0.05)
    rotation_degrees: tuple[float, float] = (-10.0, 10.0)
    scale_range: tuple[float, float] = (-10.0, 10.0)  # percent
    noise_mean: float = 0.0
    noise_variance: float = 0.0002
    enabled: bool = True

    def __post_init__(self):
        for name in ("intensity_shift_range", "rotation_degrees", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be (low, high) with low <= high, got {(lo, hi)}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: tuple[int, int] = (64, 64)
    positive_fraction: float = 0.8
    orientation: str = "sagittal"
    epoch_size: Optional[int] = None  # None -> orientation default
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    brain_threshold: float = 0.1
    negative_slices: str = "hippocampus"

    def __post_init__(self):
        if len(self.patch_size) != 2 or any(s < 1 for s in self.patch_size):
            raise ValueError(f"patch_size must be two positive ints, got {self.patch_size}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError(f"positive_fraction must be in [0,1], got {self.positive_fraction}")
        if self.orientation not in ORIENTATION_AXIS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if self.epoch_size is not None and self.epoch_size < 1:
            raise ValueError(f"epoch_size must be >= 1, got {self.epoch_size}")
        if self.negative_slices not in NEGATIVE_SLICE_POLICIES:
            raise ValueError(
                f"negative_slices must be one of {NEGATIVE_SLICE_POLICIES}, "
                f"got {self.negative_slices!r}")

    def resolved_epoch_size(self) -> int:
        if self.epoch_size is not None:
            return self.epoch_size
        return DEFAULT_EPOCH_SIZES[self.orientation]


@dataclass(frozen=True)
class PatchProvenance:
    volume_id: str
    orientation: str
    plane_index: int
    center: tuple[int, int, int]
    positive: bool

    def to_json(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        return d


@dataclass
class PatchBatch:
    inputs: np.ndarray  # (B, 3, H, W) float32
    targets: np.ndarray  # (B, H, W) uint8
    provenance: list[PatchProvenance]

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.targets.ndim != 3:
            raise ValueError("inputs must be (B,3,H,W) and targets (B,H,W)")
        if len(self.inputs) != len(self.targets) or len(self.inputs) != len(self.provenance):
            raise ValueError("inputs, targets and provenance lengths differ")
        if len(self.inputs) < 1:
            raise ValueError("batch must contain at least one patch")
        if not np.isfinite(self.inputs).all():
            raise ValueError("batch inputs contain non-finite values")

    def __len__(self) -> int:
        return len(self.inputs)


def _inplane_cross(axis: int) -> np.ndarray:
    """3D structuring element: center plus its 4 in-plane neighbors."""
    s = np.zeros((3, 3, 3), dtype=bool)
    s[1, 1, 1] = True
    for b in range(3):
        if b == axis:
            continue
        idx = [1, 1, 1]
        for d in (0, 2):
            idx[b] = d
            s[tuple(idx)] = True
    return s


def border_voxels(mask: LabelMask, orientation: str) -> np.ndarray:
    """(N, 3) coordinates of mask voxels with an in-plane background 4-neighbor."""
    axis = ORIENTATION_AXIS[orientation]
    m = mask.data.astype(bool)
    interior = ndimage.binary_erosion(m, structure=_inplane_cross(axis), border_value=1)
    return np.argwhere(m & ~interior)


def brain_voxels(
    volume: Volume, mask: LabelMask, config: SamplerConfig
) -> np.ndarray:
    """(N, 3) candidate negative centers: above-threshold voxels, optionally
    restricted to slices (along the sampling axis) that contain mask."""
    axis = ORIENTATION_AXIS[config.orientation]
    brain = volume.data > config.brain_threshold
    if config.negative_slices == "hippocampus" and mask.data.any():
        inplane = tuple(a for a in range(3) if a != axis)
        keep = mask.data.any(axis=inplane)  # per-plane flag along the sampling axis
        expand = [None, None, None]
        expand[axis] = slice(None)
        brain &= keep[tuple(expand)]
    return np.argwhere(brain)


def _crop_window(arr: np.ndarray, center: tuple[int, int], size: tuple[int, int]) -> np.ndarray:
    """Zero-padded window on the trailing 2 dims, top-left at center - size//2."""
    h, w = size
    r0 = center[0] - h // 2
    c0 = center[1] - w // 2
    out = np.zeros(arr.shape[:-2] + (h, w), dtype=arr.dtype)
    sr0, sc0 = max(r0, 0), max(c0, 0)
    sr1 = min(r0 + h, arr.shape[-2])
    sc1 = min(c0 + w, arr.shape[-1])
    if sr0 < sr1 and sc0 < sc1:
        out[..., sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0] = arr[..., sr0:sr1, sc0:sc1]
    return out


def _extract_at(
    volume: Volume,
    mask: LabelMask,
    center: np.ndarray,
    config: SamplerConfig,
    positive: bool,
    volume_id: str,
) -> tuple[np.ndarray, np.ndarray, PatchProvenance]:
    axis = ORIENTATION_AXIS[config.orientation]
    plane_index = int(center[axis])
    inplane = tuple(int(center[a]) for a in range(3) if a != axis)
    triplet = extract_slice_triplet(volume, SlicePlane(config.orientation, plane_index))
    target_slice = np.take(mask.data, plane_index, axis=axis)
    patch_in = _crop_window(triplet, inplane, config.patch_size).astype(np.float32)
    patch_tg = _crop_window(target_slice, inplane, config.patch_size)
    prov = PatchProvenance(
        volume_id=volume_id,
        orientation=config.orientation,
        plane_index=plane_index,
        center=tuple(int(c) for c in center),
        positive=positive,
    )
    return patch_in, patch_tg, prov


def sample_patch(
    volume: Volume,
    mask: LabelMask,
    config: SamplerConfig,
    draw: str,
    rng: Optional[np.random.Generator] = None,
    volume_id: str = "",
):
    """Draw one patch. `draw` is "positive" or "negative".

    Positive draws center on a mask border voxel (in-plane 4-connectivity);
    negative draws on a brain voxel per the configured slice policy. The
    window is zero-padded where it leaves the slice.
    """
    if draw not in ("positive", "negative"):
        raise ValueError(f"draw must be 'positive' or 'negative', got {draw!r}")
    if not volume.is_canonical():
        raise ValueError(f"volume axes {volume.axes!r} are not canonical")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if draw == "positive":
        candidates = border_voxels(mask, config.orientation)
        if len(candidates) == 0:
            raise ValueError(
                f"positive draw on volume {volume_id or '<unnamed>'}: mask is empty "
                f"(no border voxels on {config.orientation} slices)")
    else:
        candidates = brain_voxels(volume, mask, config)
        if len(candidates) == 0:
            raise ValueError(
                f"negative draw on volume {volume_id or '<unnamed>'}: no voxels above "
                f"brain threshold {config.brain_threshold}")
    center = candidates[rng.integers(len(candidates))]
    return _extract_at(volume, mask, center, config, draw == "positive", volume_id)


def augment_patch(
    inputs: np.ndarray,
    target: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Random rotation/scale, intensity shift, and input noise.

    Draw order is fixed (angle, scale, shift, noise) so a seeded generator
    reproduces the augmentation exactly. Rotation and scale share one
    transform applied to all input channels (bilinear) and to the target
    (nearest neighbor, so it stays binary). The intensity shift is clamped
    to [0, 1]; noise is added to inputs only, after the clamp.
    """
    if not config.enabled:
        return inputs, target
    angle = np.deg2rad(rng.uniform(*config.rotation_degrees))
    factor = 1.0 + rng.uniform(*config.scale_range) / 100.0
    shift = rng.uniform(*config.intensity_shift_range)

    h, w = target.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    cos, sin = np.cos(angle), np.sin(angle)
    # output voxel -> input voxel: inverse rotation, inverse scale, about center
    matrix = np.array([[cos, sin], [-sin, cos]]) / factor
    offset = center - matrix @ center

    out_in = np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="constant")
        for ch in inputs.astype(np.float32)
    ])
    out_tg = ndimage.affine_transform(target, matrix, offset=offset, order=0, mode="constant")

    out_in = np.clip(out_in + shift, 0.0, 1.0)
    out_in += rng.normal(config.noise_mean, np.sqrt(config.noise_variance), size=out_in.shape)
    return out_in.astype(np.float32), out_tg.astype(target.dtype)


class _CaseCandidates:
    """Per-volume candidate centers, computed once per stream."""

    def __init__(self, case, config: SamplerConfig):
        self.case = case
        self.positive = border_voxels(case.mask, config.orientation)
        self.negative = brain_voxels(case.volume, case.mask, config)


def epoch_stream(
    cases: Sequence,
    config: SamplerConfig,
    batch_size: int = 200,
    epoch: int = 0,
):
    """Yield ceil(epoch_size / batch_size) PatchBatches for one epoch.

    The stream is seeded by (config.seed, epoch): one epoch is exactly
    reproducible, and distinct epochs draw independent patches. Per draw, a
    Bernoulli(positive_fraction) picks the patch sign, then a volume with
    candidates of that sign is chosen uniformly.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("epoch_stream requires a non-empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
    cands = [_CaseCandidates(c, config) for c in cases]
    pos_cases = [c for c in cands if len(c.positive)]
    neg_cases = [c for c in cands if len(c.negative)]
    if config.positive_fraction > 0 and not pos_cases:
        raise ValueError("no volume offers positive patch centers (all masks empty)")
    if config.positive_fraction < 1 and not neg_cases:
        raise ValueError("no volume offers negative patch centers")

    remaining = config.resolved_epoch_size()
    while remaining > 0:
        n = min(batch_size, remaining)
        remaining -= n
        inputs = np.empty((n, 3) + tuple(config.patch_size), dtype=np.float32)
        targets = np.empty((n,) + tuple(config.patch_size), dtype=np.uint8)
        provenance = []
        for b in range(n):
            positive = rng.random() < config.positive_fraction
            pool = pos_cases if positive else neg_cases
            cand = pool[rng.integers(len(pool))]
            centers = cand.positive if positive else cand.negative
            center = centers[rng.integers(len(centers))]
            patch_in, patch_tg, prov = _extract_at(
                cand.case.volume, cand.case.mask, center, config,
                positive, cand.case.case_id,
            )
            if config.augment.enabled:
                patch_in, patch_tg = augment_patch(patch_in, patch_tg, config.augment, rng)
            inputs[b] = patch_in
            targets[b] = patch_tg
            provenance.append(prov)
        yield PatchBatch(inputs, targets, provenance)
