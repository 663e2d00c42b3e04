"""Whole-volume inference: per-orientation sweeps, consensus, thresholding.

Each orientation network sweeps its slice axis producing an activation
volume; the three volumes are averaged voxelwise and thresholded. Optional
component filtering removes spurious islands.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkEnsemble, SegmentationNet, inference_shape, _predict_batch
from .postprocess import remove_false_positives
from .volumes import (
    LabelMask,
    ORIENTATION_AXIS,
    SlicePlane,
    Volume,
    center_crop_pad,
    extract_slice_triplet,
)

ACTIVATION_SOURCES = ("sagittal", "coronal", "axial", "consensus")


@dataclass
class ActivationVolume:
    """Voxelwise foreground probabilities on a volume's grid."""

    data: np.ndarray
    source: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"activation data must be 3D, got shape {self.data.shape}")
        if self.source not in ACTIVATION_SOURCES:
            raise ValueError(f"source must be one of {ACTIVATION_SOURCES}, got {self.source!r}")
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"activations must lie in [0, 1], found range [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def predict_orientation(
    net: SegmentationNet,
    volume: Volume,
    orientation: str,
    batch_size: int = 16,
    boundary: str = "replicate",
) -> ActivationVolume:
    """Sweep one slice axis of a canonical volume through a network.

    Slices are batched for speed; batch norm runs in eval mode so the
    result is identical to running predict_slice per plane.
    """
    if orientation not in ORIENTATION_AXIS:
        raise ValueError(f"unknown orientation {orientation!r}")
    if not volume.is_canonical():
        raise ValueError(f"volume axes {volume.axes!r} are not canonical; "
                         "run to_canonical first")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    axis = ORIENTATION_AXIS[orientation]
    n = volume.shape[axis]
    plane_shape = tuple(s for a, s in enumerate(volume.shape) if a != axis)
    crop_shape = inference_shape(plane_shape, net.config.downsample_factor)

    out = np.zeros(volume.shape, dtype=np.float32)
    out_planes = np.moveaxis(out, axis, 0)  # view; writes land in `out`
    for start in range(0, n, batch_size):
        idxs = range(start, min(start + batch_size, n))
        triplets = np.stack(
            [extract_slice_triplet(volume, SlicePlane(orientation, i), boundary) for i in idxs]
        )
        padded, placement = center_crop_pad(triplets, crop_shape)
        fg = _predict_batch(net, padded)
        out_planes[idxs.start : idxs.stop] = placement.invert(fg)
    return ActivationVolume(out, source=orientation)


def consensus(
    sagittal: ActivationVolume, coronal: ActivationVolume, axial: ActivationVolume
) -> ActivationVolume:
    """Voxelwise mean of the three orientation activations."""
    shapes = {sagittal.shape, coronal.shape, axial.shape}
    if len(shapes) != 1:
        raise ValueError(f"activation shapes differ: {sorted(shapes)}")
    mean = (sagittal.data + coronal.data + axial.data) / 3.0
    return ActivationVolume(np.clip(mean, 0.0, 1.0), source="consensus")


def binarize(activation: ActivationVolume, threshold: float = 0.5) -> LabelMask:
    """Foreground where activation >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return LabelMask((activation.data >= threshold).astype(np.uint8))


def segment_volume(
    ensemble: NetworkEnsemble,
    volume: Volume,
    threshold: float = 0.5,
    n_keep: int = 2,
    postprocess: bool = True,
    batch_size: int = 16,
) -> tuple[LabelMask, dict[str, ActivationVolume]]:
    """Full pipeline on one canonical volume.

    Returns the final mask plus all four activation volumes (three
    orientations and their consensus) for inspection.
    """
    activations = {
        o: predict_orientation(ensemble.net_for(o), volume, o, batch_size=batch_size)
        for o in ("sagittal", "coronal", "axial")
    }
    activations["consensus"] = consensus(
        activations["sagittal"], activations["coronal"], activations["axial"]
    )
    mask = binarize(activations["consensus"], threshold)
    if postprocess:
        mask = remove_false_positives(mask, n_max=n_keep)
    return mask, activations
