"""3D connected-component labeling and largest-component false-positive removal."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volumes import LabelMask

CONNECTIVITIES = (6, 26)


@dataclass
class ComponentSet:
    """Labeled components of a binary mask.

    labels: int32 array, 0 = background, components numbered 1..count.
    sizes: voxel count per component, sizes[k] is the size of label k+1.
    """

    labels: np.ndarray
    sizes: np.ndarray
    connectivity: int

    @property
    def count(self) -> int:
        return len(self.sizes)

    def largest_labels(self, n_max: int) -> list[int]:
        """Labels of the up-to-n_max largest components; ties keep the lowest label."""
        order = sorted(range(self.count), key=lambda k: (-int(self.sizes[k]), k))
        return [k + 1 for k in order[:n_max]]


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def label_components(mask: LabelMask, connectivity: int = 26) -> ComponentSet:
    """Partition mask foreground into connected components.

    Two voxels share a label iff they are connected under the chosen
    neighborhood (6 = faces only, 26 = faces+edges+corners).
    """
    structure = _structure(connectivity)
    labels, count = ndimage.label(mask.data, structure=structure)
    labels = labels.astype(np.int32)
    if count == 0:
        sizes = np.zeros(0, dtype=np.int64)
    else:
        sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:].astype(np.int64)
    return ComponentSet(labels, sizes, connectivity)


def keep_largest(components: ComponentSet, n_max: int = 2) -> LabelMask:
    """Zero out all but the n_max largest components (fewer if not present)."""
    if n_max < 0:
        raise ValueError(f"n_max must be >= 0, got {n_max}")
    keep = components.largest_labels(n_max)
    if not keep:
        return LabelMask(np.zeros(components.labels.shape, dtype=np.uint8))
    out = np.isin(components.labels, keep)
    return LabelMask(out.astype(np.uint8))


def remove_false_positives(mask: LabelMask, n_max: int = 2, connectivity: int = 26) -> LabelMask:
    """Convenience: label then keep the n_max largest components."""
    return keep_largest(label_components(mask, connectivity), n_max)
