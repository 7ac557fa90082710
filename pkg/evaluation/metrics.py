"""
📏 METRICS
WHAT: Volumetric dice, report aggregation and the annotation-cost calculator.
"""
import numpy as np

from utils.exceptions import ConfigurationError, ShapeError
from volumes.records import LabelMask

DEFAULT_WEAK_FACTOR = 15.0


def _foreground(mask):
    if isinstance(mask, LabelMask):
        return mask.foreground
    return np.asarray(mask) > 0


def dice(pred, truth):
    """
    2|P∩T| / (|P| + |T|) over binary masks of any rank (LabelMask or array).
    Both empty counts as a perfect match (1.0).
    """
    p = _foreground(pred)
    t = _foreground(truth)
    if p.shape != t.shape:
        raise ShapeError(f"dice needs equal extents, got {p.shape} and {t.shape}")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def summarize(values):
    """(mean, median) of a non-empty list of scores."""
    if not len(values):
        raise ConfigurationError("cannot summarise an empty score list")
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(np.median(values))


def annotation_cost_ratio(full_shot_annotations, support_full, support_weak, weak_factor=DEFAULT_WEAK_FACTOR):
    """
    How many times cheaper the support set is than full-shot annotation,
    counting a weak (box) annotation as 1/weak_factor of a full one.
    """
    if weak_factor <= 0:
        raise ConfigurationError(f"weak_factor must be > 0, got {weak_factor}")
    if support_full < 0 or support_weak < 0 or full_shot_annotations < 0:
        raise ConfigurationError("annotation counts must be non-negative")
    denominator = support_full + support_weak / weak_factor
    if denominator <= 0:
        raise ConfigurationError("support set holds no annotations; cost ratio is undefined")
    return full_shot_annotations / denominator
