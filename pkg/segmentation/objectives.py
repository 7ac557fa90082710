"""
🎯 OBJECTIVES
WHAT: The nearest-neighbour prototype loss, the class-balanced cross-entropy,
      their sum for reporting, and the registry of learned class prototypes.
"""
import logging
from collections import OrderedDict

import numpy as np

from autograd import ops
from autograd.tensor import Tensor
from utils.exceptions import ConfigurationError, NonFiniteError, ShapeError

from .config import LossConfig

logger = logging.getLogger(__name__)


class MissingPrototypeError(ConfigurationError):
    """nn_loss was asked about a class the registry has never seen."""


class PrototypeRegistry:
    """
    class_id -> (prototype, count), merged by exponential moving average.
    Prototypes are stored as constants; nn_loss never differentiates them.
    """

    def __init__(self, momentum=0.9):
        self.momentum = float(momentum)
        self.entries = OrderedDict()
        self.counts = {}

    def __contains__(self, class_id):
        return class_id in self.entries

    def __len__(self):
        return len(self.entries)

    @property
    def classes(self):
        return sorted(self.entries)

    def get(self, class_id):
        return self.entries[class_id]

    def update(self, class_id, p_hat):
        values = np.asarray(p_hat.numpy() if isinstance(p_hat, Tensor) else p_hat, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"prototype for class {class_id} is not finite", tensor_name=f"registry.{class_id}")
        if class_id not in self.entries:
            self.entries[class_id] = values.copy()
            self.counts[class_id] = 1
        else:
            merged = self.momentum * self.entries[class_id] + (1.0 - self.momentum) * values
            self.entries[class_id] = merged.astype(np.float32)
            self.counts[class_id] += 1
        return self

    def set(self, class_id, values, count=1):
        self.entries[class_id] = np.asarray(values, dtype=np.float32).reshape(-1).copy()
        self.counts[class_id] = count

    def snapshot(self):
        return {k: v.copy() for k, v in self.entries.items()}


def update_registry(registry, class_id, p_hat):
    return registry.update(class_id, p_hat)


def nn_loss(p_hat, registry, class_id, cfg=None):
    """-log softmax over registry classes of tau * cos(p_hat, p_k), at class_id."""
    cfg = cfg or LossConfig()
    if class_id not in registry:
        raise MissingPrototypeError(f"class {class_id} has no registry prototype (known: {registry.classes})")
    classes = registry.classes
    similarities = ops.stack([ops.cosine_similarity(p_hat, Tensor(registry.get(k))) for k in classes])
    logits = ops.scale(similarities, cfg.temperature)
    return ops.cross_entropy(logits, classes.index(class_id))


def class_balance_weight(target, cfg=None):
    """beta for one slice: #background / #foreground clamped, 1 for empty slices."""
    cfg = cfg or LossConfig()
    if cfg.beta_mode == "fixed":
        return float(cfg.beta)
    labels = target.numpy() if isinstance(target, Tensor) else np.asarray(target)
    foreground = float((labels > 0.5).sum())
    if foreground == 0:
        return 1.0
    background = float(labels.size) - foreground
    return float(np.clip(background / foreground, cfg.beta_min, cfg.beta_max))


def weighted_ce(pred, target, cfg=None, beta=None):
    """Mean over pixels of -[beta y log p + (1 - y) log(1 - p)]."""
    cfg = cfg or LossConfig()
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if beta is None:
        beta = class_balance_weight(target, cfg)
    return ops.weighted_bce(pred, target, beta, cfg.eps)


def total_loss(nn, wce):
    """nn + wce with unit weights, as a float for logging."""
    total = float(nn) + float(wce)
    if not np.isfinite(total):
        raise NonFiniteError(f"total loss is not finite ({nn} + {wce})")
    return total
