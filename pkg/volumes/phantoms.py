"""
🧪 SYNTHETIC ORGAN PHANTOMS
WHAT: Desk-scale stand-in for a multi-organ CT cohort.
HOW:  Every patient is one body image holding an ellipsoidal "organ" per class.
      A class keeps its place on a ring around the volume centre, its aspect
      ratio, its orientation and its intensity band; each patient jitters the
      centre (±10%), radii (±20%), rotation and intensity, then Gaussian noise
      is added and the image is clamped to [0, 1].

Generation is a pure function of the PhantomSpec: organ k of patient p draws from
default_rng([seed, k, p]) and the patient's noise from default_rng([seed, 0, p]).
"""
import logging

import numpy as np

from utils.exceptions import DataError

from .records import AnnotatedVolume, LabelMask, Volume, VolumeKind

logger = logging.getLogger(__name__)

# (rz, ry, rx) radii as fractions of (D, H, W), cycled over classes
ASPECT_TABLE = (
    (0.30, 0.10, 0.16),
    (0.22, 0.16, 0.10),
    (0.35, 0.09, 0.09),
    (0.18, 0.14, 0.14),
)
RING_OFFSET = 0.2
CENTRE_JITTER = 0.10
RADIUS_JITTER = 0.20
ROTATION_JITTER = 0.3
INTENSITY_JITTER = 0.05
BACKGROUND_INTENSITY = 0.15
MIN_RADIUS = 2.0
MAX_RETRIES = 10


class DegeneratePhantomError(DataError):
    """An organ radius stayed below the minimum after every retry."""


def class_intensity(class_id, n_classes):
    """Base intensity of class k, spread over [0.35, 0.85]."""
    return 0.35 + 0.5 * (class_id - 1) / max(n_classes - 1, 1)


def _organ_geometry(spec, class_id, patient_id):
    d, h, w = spec.dims
    rng = np.random.default_rng([spec.seed, class_id, patient_id])
    angle = 2.0 * np.pi * (class_id - 1) / spec.n_classes
    ring_centre = np.array([d / 2.0, h / 2.0 + RING_OFFSET * h * np.sin(angle), w / 2.0 + RING_OFFSET * w * np.cos(angle)])
    fractions = np.array(ASPECT_TABLE[(class_id - 1) % len(ASPECT_TABLE)])
    orientation = np.pi * (class_id - 1) / spec.n_classes
    extents = np.array([d, h, w], dtype=np.float64)

    for attempt in range(MAX_RETRIES + 1):
        centre = ring_centre + rng.uniform(-CENTRE_JITTER, CENTRE_JITTER, size=3) * extents
        radii = fractions * extents * rng.uniform(1.0 - RADIUS_JITTER, 1.0 + RADIUS_JITTER, size=3)
        rotation = orientation + rng.uniform(-ROTATION_JITTER, ROTATION_JITTER)
        intensity = class_intensity(class_id, spec.n_classes) + rng.uniform(-INTENSITY_JITTER, INTENSITY_JITTER)
        if radii.min() >= MIN_RADIUS:
            return centre, radii, rotation, intensity
        logger.warning(
            f"⚠️ Degenerate organ (class {class_id}, patient {patient_id}): "
            f"min radius {radii.min():.2f} < {MIN_RADIUS}, retry {attempt + 1}/{MAX_RETRIES}"
        )
    raise DegeneratePhantomError(
        f"class {class_id} of patient {patient_id} keeps a radius below {MIN_RADIUS} voxels "
        f"for dims {spec.dims}; use larger extents"
    )


def _ellipsoid(dims, centre, radii, rotation):
    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float64) + 0.5 for n in dims), indexing="ij")
    dz = (z - centre[0]) / radii[0]
    dy = y - centre[1]
    dx = x - centre[2]
    cos, sin = np.cos(rotation), np.sin(rotation)
    u = (dy * cos + dx * sin) / radii[1]
    v = (-dy * sin + dx * cos) / radii[2]
    return dz * dz + u * u + v * v <= 1.0


def generate_patient(spec, patient_id):
    """
    Build one patient's body image and every class mask.

    Returns (Volume, {class_id: LabelMask}).
    """
    image = np.full(spec.dims, BACKGROUND_INTENSITY, dtype=np.float64)
    masks = {}
    for class_id in range(1, spec.n_classes + 1):
        centre, radii, rotation, intensity = _organ_geometry(spec, class_id, patient_id)
        inside = _ellipsoid(spec.dims, centre, radii, rotation)
        if not inside.any():
            raise DegeneratePhantomError(f"class {class_id} of patient {patient_id} has an empty mask")
        # Later classes paint over earlier ones where organs touch.
        image[inside] = intensity
        masks[class_id] = LabelMask(inside.astype(np.uint8) * class_id, VolumeKind.FULL)

    noise_rng = np.random.default_rng([spec.seed, 0, patient_id])
    image += noise_rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    volume = Volume(np.clip(image, 0.0, 1.0).astype(np.float32))
    return volume, masks


def generate_phantoms(spec):
    """One AnnotatedVolume per (class, patient), ordered by class then patient."""
    by_patient = {p: generate_patient(spec, p) for p in range(spec.n_patients)}
    records = []
    for class_id in range(1, spec.n_classes + 1):
        for patient_id in range(spec.n_patients):
            volume, masks = by_patient[patient_id]
            records.append(AnnotatedVolume(patient_id, class_id, volume, masks[class_id]))
    logger.info(
        f"✅ Generated {len(records)} phantoms ({spec.n_classes} classes x {spec.n_patients} patients, dims {spec.dims})"
    )
    return records
