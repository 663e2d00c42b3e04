"""3D volumes and masks: normalization, axis canonicalization, slicing, crop/pad, I/O.

The canonical axis order used throughout the pipeline is RAS: array axis 0
runs left-to-right (slicing it gives sagittal planes), axis 1 posterior-to-
anterior (coronal planes), axis 2 inferior-to-superior (axial planes).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nifti

ORIENTATIONS = ("sagittal", "coronal", "axial")
ORIENTATION_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}
CANONICAL_AXES = "RAS"

# letter -> (anatomical axis family, points along +world axis)
_AXIS_LETTERS = {
    "R": (0, True), "L": (0, False),
    "A": (1, True), "P": (1, False),
    "S": (2, True), "I": (2, False),
}
_POSITIVE_LETTER = {0: "R", 1: "A", 2: "S"}
_NEGATIVE_LETTER = {0: "L", 1: "P", 2: "I"}


class OrientationError(ValueError):
    """Raised when a volume's orientation metadata is missing or ambiguous."""


def _check_axes_code(axes: str) -> None:
    if len(axes) != 3 or sorted(_AXIS_LETTERS.get(c, (-1,))[0] for c in axes) != [0, 1, 2]:
        raise OrientationError(f"invalid axes code {axes!r}: need one of R/L, A/P, S/I per axis")


@dataclass
class Volume:
    """A 3D scalar image with voxel spacing and anatomical axis labels."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    axes: str = CANONICAL_AXES
    affine: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"Volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"Volume axes must all have extent >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        _check_axes_code(self.axes)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def is_canonical(self) -> bool:
        return self.axes == CANONICAL_AXES


@dataclass
class LabelMask:
    """Binary segmentation aligned to a Volume's grid."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"LabelMask data must be 3D, got shape {self.data.shape}")
        uniq = np.unique(self.data)
        if not np.isin(uniq, [0, 1]).all():
            raise ValueError(f"LabelMask values must be 0 or 1, found {uniq[:8]}")
        self.data = self.data.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class SlicePlane:
    """One anatomical slicing plane of a canonical volume."""

    orientation: str
    index: int

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")

    @property
    def axis(self) -> int:
        return ORIENTATION_AXIS[self.orientation]


def normalize_minmax(volume: Volume) -> Volume:
    """Min-max normalize intensities to [0, 1]; constant volumes map to zeros."""
    data = volume.data.astype(np.float32)
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        out = np.zeros_like(data)
    else:
        out = (data - lo) / (hi - lo)
    return Volume(out, volume.spacing, volume.axes, volume.affine)


@dataclass(frozen=True)
class AxisTransform:
    """Permutation + flips mapping a volume's axes onto the canonical order.

    apply() first transposes source axes into canonical positions, then
    reverses the axes whose orientation letters pointed the negative way.
    Both steps are exactly invertible.
    """

    source_axes: str
    perm: tuple[int, int, int]
    flips: tuple[bool, bool, bool]

    @property
    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and not any(self.flips)

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = np.transpose(arr, self.perm)
        ax = [i for i, f in enumerate(self.flips) if f]
        if ax:
            out = np.flip(out, axis=ax)
        return np.ascontiguousarray(out)

    def invert(self, arr: np.ndarray) -> np.ndarray:
        ax = [i for i, f in enumerate(self.flips) if f]
        out = np.flip(arr, axis=ax) if ax else arr
        inv = tuple(int(i) for i in np.argsort(self.perm))
        return np.ascontiguousarray(np.transpose(out, inv))

    def to_json(self) -> dict:
        return {"source_axes": self.source_axes, "perm": list(self.perm),
                "flips": list(self.flips)}

    @classmethod
    def from_json(cls, d: dict) -> "AxisTransform":
        return cls(d["source_axes"], tuple(d["perm"]), tuple(bool(f) for f in d["flips"]))


def _canonical_transform(axes: str) -> AxisTransform:
    _check_axes_code(axes)
    perm = [0, 0, 0]
    flips = [False, False, False]
    for target in range(3):
        for src, letter in enumerate(axes):
            fam, positive = _AXIS_LETTERS[letter]
            if fam == target:
                perm[target] = src
                flips[target] = not positive
    return AxisTransform(axes, tuple(perm), tuple(flips))


def to_canonical(
    volume: Volume, mask: Optional[LabelMask] = None
) -> tuple[Volume, Optional[LabelMask], AxisTransform]:
    """Reorder axes (permutation/flips only) so that axes == "RAS".

    The returned AxisTransform inverts the reordering bit-exactly via
    ``transform.invert``. Does not resample; spacing is permuted alongside.
    """
    tf = _canonical_transform(volume.axes)
    if tf.is_identity:
        return volume, mask, tf
    data = tf.apply(volume.data)
    spacing = tuple(volume.spacing[p] for p in tf.perm)
    affine = None
    if volume.affine is not None:
        affine = volume.affine @ _index_map_matrix(tf, data.shape)
    out_vol = Volume(data, spacing, CANONICAL_AXES, affine)
    out_mask = LabelMask(tf.apply(mask.data)) if mask is not None else None
    return out_vol, out_mask, tf


def _index_map_matrix(tf: AxisTransform, canonical_shape: tuple[int, int, int]) -> np.ndarray:
    """4x4 matrix taking canonical voxel indices to source voxel indices."""
    m = np.zeros((4, 4))
    m[3, 3] = 1.0
    for i in range(3):
        sign = -1.0 if tf.flips[i] else 1.0
        m[tf.perm[i], i] = sign
        if tf.flips[i]:
            m[tf.perm[i], 3] = canonical_shape[i] - 1
    return m


def axes_from_affine(affine: np.ndarray, name: str = "<volume>") -> str:
    """Derive the 3-letter axis code from a voxel-to-world affine.

    Each data axis is assigned the anatomical axis its affine column mostly
    points along. Raises OrientationError if two data axes map to the same
    anatomical axis (oblique/ambiguous affine) or a column is all zero.
    """
    rot = np.asarray(affine, dtype=float)[:3, :3]
    letters = []
    used = set()
    for col in range(3):
        v = rot[:, col]
        if not np.any(v):
            raise OrientationError(f"{name}: affine column {col} is zero; orientation unknown")
        fam = int(np.argmax(np.abs(v)))
        if fam in used:
            raise OrientationError(
                f"{name}: ambiguous affine; data axes map to the same anatomical axis"
            )
        used.add(fam)
        letters.append(_POSITIVE_LETTER[fam] if v[fam] > 0 else _NEGATIVE_LETTER[fam])
    return "".join(letters)


def extract_slice_triplet(
    volume: Volume, plane: SlicePlane, boundary: str = "replicate"
) -> np.ndarray:
    """Stack slices (index-1, index, index+1) along `plane` as a 3-channel image.

    At volume boundaries the missing neighbor is the edge slice replicated
    (default) or zero-filled (boundary="zero").
    """
    if boundary not in ("replicate", "zero"):
        raise ValueError(f"boundary must be 'replicate' or 'zero', got {boundary!r}")
    axis = plane.axis
    n = volume.shape[axis]
    idx = plane.index
    if not 0 <= idx < n:
        raise ValueError(f"slice index {idx} out of range for axis extent {n}")

    def grab(i: int) -> np.ndarray:
        if 0 <= i < n:
            return np.take(volume.data, i, axis=axis)
        if boundary == "zero":
            return np.zeros_like(np.take(volume.data, idx, axis=axis))
        return np.take(volume.data, min(max(i, 0), n - 1), axis=axis)

    return np.stack([grab(idx - 1), grab(idx), grab(idx + 1)], axis=0)


@dataclass(frozen=True)
class Placement:
    """Records how center_crop_pad mapped a source image into its output."""

    src_shape: tuple[int, int]
    target_shape: tuple[int, int]
    src_offset: tuple[int, int]
    dst_offset: tuple[int, int]
    overlap: tuple[int, int]

    def invert(self, out: np.ndarray) -> np.ndarray:
        """Place the overlap region back into a zero source-shaped array."""
        if tuple(out.shape[-2:]) != self.target_shape:
            raise ValueError(f"expected trailing shape {self.target_shape}, got {out.shape}")
        src = np.zeros(out.shape[:-2] + self.src_shape, dtype=out.dtype)
        (r0, c0), (R0, C0), (h, w) = self.src_offset, self.dst_offset, self.overlap
        src[..., r0 : r0 + h, c0 : c0 + w] = out[..., R0 : R0 + h, C0 : C0 + w]
        return src


def center_crop_pad(image: np.ndarray, target_shape: tuple[int, int]) -> tuple[np.ndarray, Placement]:
    """Center-crop and/or zero-pad a 2D image (or stack thereof) to target_shape.

    Operates on the trailing two dimensions, so channel-first stacks pass
    through unchanged. The returned Placement inverts the mapping losslessly
    inside the overlap region.
    """
    th, tw = int(target_shape[0]), int(target_shape[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target shape must be >= 1 per dim, got {(th, tw)}")
    h, w = image.shape[-2:]
    oh, ow = min(h, th), min(w, tw)
    src_off = ((h - oh) // 2, (w - ow) // 2)
    dst_off = ((th - oh) // 2, (tw - ow) // 2)
    out = np.zeros(image.shape[:-2] + (th, tw), dtype=image.dtype)
    out[..., dst_off[0] : dst_off[0] + oh, dst_off[1] : dst_off[1] + ow] = image[
        ..., src_off[0] : src_off[0] + oh, src_off[1] : src_off[1] + ow
    ]
    return out, Placement((h, w), (th, tw), src_off, dst_off, (oh, ow))


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def load_volume(path, assume_canonical: bool = False) -> Volume:
    """Load a NIfTI volume; axes derived from its affine.

    With assume_canonical, files lacking orientation metadata are accepted
    and treated as already being in canonical axis order.
    """
    data, affine, spacing = nifti.read(path, allow_missing_orientation=assume_canonical)
    if affine is None:
        axes = CANONICAL_AXES
    else:
        axes = axes_from_affine(affine, name=str(path))
    return Volume(np.asarray(data, dtype=np.float32), spacing, axes, affine)


def save_volume(volume: Volume, path) -> None:
    nifti.write(path, volume.data, _affine_of(volume), volume.spacing)


def load_mask(path, canonical: bool = False, assume_canonical: bool = False) -> LabelMask:
    """Load a binary NIfTI mask; optionally reorder it into canonical axes."""
    data, affine, _spacing = nifti.read(path, allow_missing_orientation=assume_canonical)
    arr = np.asarray(data)
    if not np.isin(np.unique(arr), [0, 1]).all():
        raise ValueError(f"{path}: mask values must be 0/1")
    mask = LabelMask(arr.astype(np.uint8))
    if canonical and affine is not None:
        axes = axes_from_affine(affine, name=str(path))
        mask = LabelMask(_canonical_transform(axes).apply(mask.data))
    return mask


def save_mask(mask: LabelMask, path, like: Optional[Volume] = None) -> None:
    """Write a mask as uint8 NIfTI, borrowing grid metadata from `like`."""
    if like is not None:
        if like.shape != mask.shape:
            raise ValueError(f"mask shape {mask.shape} != reference shape {like.shape}")
        affine, spacing = _affine_of(like), like.spacing
    else:
        affine, spacing = np.eye(4), (1.0, 1.0, 1.0)
    nifti.write(path, mask.data.astype(np.uint8), affine, spacing)


def _affine_of(volume: Volume) -> np.ndarray:
    if volume.affine is not None:
        return volume.affine
    # synthesize an affine consistent with the axes code and spacing
    aff = np.zeros((4, 4))
    aff[3, 3] = 1.0
    for j, letter in enumerate(volume.axes):
        fam, positive = _AXIS_LETTERS[letter]
        aff[fam, j] = (1.0 if positive else -1.0) * volume.spacing[j]
    return aff


def save_raw(volume: Volume, path) -> None:
    """Write the portable test format: little-endian float32 + JSON sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    sidecar = {
        "shape": list(volume.shape),
        "spacing": list(volume.spacing),
        "axes": volume.axes,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_raw(path) -> Volume:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise OrientationError(f"{path}: missing JSON sidecar {sidecar_path.name}")
    meta = json.loads(sidecar_path.read_text())
    shape = tuple(int(x) for x in meta["shape"])
    data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape)
    return Volume(data.copy(), tuple(meta["spacing"]), meta["axes"])
