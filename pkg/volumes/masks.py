"""
Weak-label derivation and slice extraction.
"""
import numpy as np

from autograd.tensor import Tensor

from .records import LabelMask, VolumeKind


def slice_bounding_box(foreground):
    """Filled tight rectangle around a 2D boolean foreground (empty stays empty)."""
    box = np.zeros_like(foreground, dtype=bool)
    rows = np.flatnonzero(foreground.any(axis=1))
    if rows.size == 0:
        return box
    cols = np.flatnonzero(foreground.any(axis=0))
    box[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = True
    return box


def to_bounding_box(mask):
    """Per axial slice, replace the foreground by its filled bounding rectangle."""
    labels = np.zeros_like(mask.labels)
    for z in range(mask.dims[0]):
        plane = mask.labels[z]
        if not plane.any():
            continue
        class_id = plane.max()
        labels[z][slice_bounding_box(plane > 0)] = class_id
    return LabelMask(labels, VolumeKind.BOX)


def foreground_areas(mask):
    """Foreground voxel count of every axial slice."""
    return (mask.labels > 0).sum(axis=(1, 2))


def axial_slices(annotated):
    """[(image[1,H,W], label[1,H,W] in {0,1}, z)] in z order."""
    voxels = annotated.volume.voxels
    labels = annotated.mask.labels
    return [
        (Tensor(voxels[z][None]), Tensor((labels[z] > 0)[None]), z)
        for z in range(annotated.dims[0])
    ]
