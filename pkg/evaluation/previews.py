"""
🖼️ SLICE PREVIEWS
Binary PGM (P5, maxval 255) overlays of a prediction against ground truth:
background 0, missed truth voxels 64, predicted voxels 128, predicted voxels
that hit the truth 255.
"""
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from utils.exceptions import DataError, ShapeError

logger = logging.getLogger(__name__)

BACKGROUND = 0
MISSED = 64
PREDICTION = 128
OVERLAP = 255


def preview_slice(pred, truth):
    """One 2D overlay as a Pillow 'L' image."""
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ShapeError(f"preview needs two equal 2D slices, got {pred.shape} and {truth.shape}")
    pixels = np.full(pred.shape, BACKGROUND, dtype=np.uint8)
    pixels[truth] = MISSED
    pixels[pred] = PREDICTION
    pixels[pred & truth] = OVERLAP
    return Image.fromarray(pixels)


def save_volume_previews(out_dir, patient_id, pred, truth):
    """
    Write patientPPP_zZZZ.pgm for every axial slice where either mask has
    foreground. Returns the written paths in z order.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create preview directory {out_dir}: {exc}") from exc
    pred_fg = pred.foreground
    truth_fg = truth.foreground
    written = []
    for z in range(pred_fg.shape[0]):
        if not (pred_fg[z].any() or truth_fg[z].any()):
            continue
        path = out_dir / f"patient{patient_id:03d}_z{z:03d}.pgm"
        try:
            preview_slice(pred_fg[z], truth_fg[z]).save(path)
        except OSError as exc:
            raise DataError(f"cannot write preview {path}: {exc}") from exc
        written.append(path)
    logger.debug(f"wrote {len(written)} previews for patient {patient_id} to {out_dir}")
    return written
