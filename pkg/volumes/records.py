"""
📦 VOLUME RECORDS
WHAT: In-memory images, label masks and the (patient, class) pairing of both.
WHEN: Produced by the phantom generator and the FSV1 reader, consumed by the
      episode sampler and evaluation.
"""
from dataclasses import dataclass, field

import numpy as np
from django.db import models

from utils.exceptions import ConfigurationError, DataError

MIN_EXTENT = 8


class VolumeKind(models.IntegerChoices):
    """Record kinds; the values double as the FSV1 kind byte."""

    IMAGE = 0, "Image"
    FULL = 1, "Full mask"
    BOX = 2, "Bounding-box mask"


@dataclass(frozen=True, eq=False)
class Volume:
    """3D intensity image, (D, H, W) float32 in [0, 1]."""

    voxels: np.ndarray

    def __post_init__(self):
        voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if voxels.ndim != 3:
            raise DataError(f"Volume needs 3 extents, got shape {voxels.shape}")
        if not np.all(np.isfinite(voxels)):
            raise DataError("Volume holds non-finite intensities")
        if voxels.size and (voxels.min() < 0.0 or voxels.max() > 1.0):
            raise DataError(f"Volume intensities outside [0, 1]: [{voxels.min()}, {voxels.max()}]")
        object.__setattr__(self, "voxels", voxels)

    kind = VolumeKind.IMAGE

    @property
    def dims(self):
        return self.voxels.shape

    def __eq__(self, other):
        return isinstance(other, Volume) and np.array_equal(self.voxels, other.voxels)


def _check_boxes(labels):
    """Every axial slice of a box mask is empty or one filled single-class rectangle."""
    for z, plane in enumerate(labels):
        foreground = plane > 0
        if not foreground.any():
            continue
        rows = np.flatnonzero(foreground.any(axis=1))
        cols = np.flatnonzero(foreground.any(axis=0))
        area = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
        if foreground.sum() != area or np.unique(plane[foreground]).size != 1:
            raise DataError(f"box mask slice {z} is not a filled single-class rectangle")


@dataclass(frozen=True, eq=False)
class LabelMask:
    """3D uint8 class-id mask (0 = background) with its annotation kind."""

    labels: np.ndarray
    kind: VolumeKind = VolumeKind.FULL

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3:
            raise DataError(f"LabelMask needs 3 extents, got shape {labels.shape}")
        if self.kind not in (VolumeKind.FULL, VolumeKind.BOX):
            raise DataError(f"LabelMask kind must be full or box, got {self.kind!r}")
        if self.kind == VolumeKind.BOX:
            _check_boxes(labels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "kind", VolumeKind(self.kind))

    @property
    def dims(self):
        return self.labels.shape

    @property
    def foreground(self):
        return self.labels > 0

    def __eq__(self, other):
        return (
            isinstance(other, LabelMask)
            and self.kind == other.kind
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class AnnotatedVolume:
    """One organ class of one patient: the patient's image plus that class's mask."""

    patient_id: int
    class_id: int
    volume: Volume
    mask: LabelMask

    def __post_init__(self):
        if self.class_id < 1:
            raise DataError(f"class_id must be >= 1, got {self.class_id}")
        if self.volume.dims != self.mask.dims:
            raise DataError(f"image dims {self.volume.dims} != mask dims {self.mask.dims}")
        present = set(np.unique(self.mask.labels).tolist()) - {0}
        if present - {self.class_id}:
            raise DataError(
                f"mask for class {self.class_id} (patient {self.patient_id}) holds labels {sorted(present)}"
            )

    @property
    def dims(self):
        return self.volume.dims


@dataclass(frozen=True)
class PhantomSpec:
    n_classes: int = 4
    n_patients: int = 20
    dims: tuple = field(default=(32, 64, 64))
    seed: int = 0
    noise_sigma: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.n_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.n_classes}")
        if self.n_patients < 2:
            raise ConfigurationError(f"need at least 2 patients, got {self.n_patients}")
        if len(self.dims) != 3 or min(self.dims) < MIN_EXTENT:
            raise ConfigurationError(f"every extent must be >= {MIN_EXTENT}, got {self.dims}")
        if self.n_classes > 255:
            raise ConfigurationError("class ids must fit in one byte")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {self.seed}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def check_levels(self, levels):
        """H and W must survive `levels` halvings."""
        _, h, w = self.dims
        factor = 2 ** levels
        if h % factor or w % factor:
            raise ConfigurationError(f"slice extents {h}x{w} are not divisible by 2^{levels}")

    def as_dict(self):
        return {
            "n_classes": self.n_classes,
            "n_patients": self.n_patients,
            "dims": list(self.dims),
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
        }
