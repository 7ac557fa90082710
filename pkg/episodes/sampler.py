"""
🎲 EPISODE SAMPLING
WHAT: Builds training episodes (support shots + query slices of one train
      class) and the evaluation tasks of a fold's held-out class.
HOW:  Support shots come from one patient: the slices with the largest
      foreground area (ties to the lowest z). The first A carry the full mask,
      the next B its per-slice bounding box. Query slices come from the other
      patients and contain foreground with probability fg_slice_prob.

Episode `i` of a fold draws from default_rng([seed, test_class, i]) only, so
episodes can be produced in any order or in parallel.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from autograd.tensor import Tensor
from utils.exceptions import ConfigurationError, DataError
from volumes.masks import foreground_areas, slice_bounding_box
from volumes.records import VolumeKind

logger = logging.getLogger(__name__)


class EpisodeSamplingError(DataError):
    """The data cannot provide the requested episode."""


@dataclass(frozen=True)
class EpisodeConfig:
    shots_full: int = 1
    shots_weak: int = 3
    query_size: int = 8
    fg_slice_prob: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.shots_full < 0 or self.shots_weak < 0 or self.shots_full + self.shots_weak < 1:
            raise ConfigurationError(
                f"need A >= 0, B >= 0 and A + B >= 1 support shots, got A={self.shots_full}, B={self.shots_weak}"
            )
        if self.query_size < 1:
            raise ConfigurationError(f"query_size must be >= 1, got {self.query_size}")
        if not 0.0 <= self.fg_slice_prob <= 1.0:
            raise ConfigurationError(f"fg_slice_prob must be in [0, 1], got {self.fg_slice_prob}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {self.seed}")

    @property
    def shots(self):
        return self.shots_full + self.shots_weak

    def for_arm(self, weak_support):
        """SS-FSL keeps the A/B split; the fully supervised arm turns every shot Full."""
        if weak_support:
            return self
        return replace(self, shots_full=self.shots, shots_weak=0)


@dataclass(frozen=True)
class SupportShot:
    image: Tensor
    annotation: Tensor
    kind: VolumeKind
    patient_id: int
    z: int


@dataclass(frozen=True)
class QuerySlice:
    image: Tensor
    label: Tensor
    patient_id: int
    z: int


@dataclass(frozen=True)
class Episode:
    index: int
    class_id: int
    support: tuple
    query: tuple

    @property
    def kinds(self):
        return [shot.kind for shot in self.support]

    @property
    def anchor(self):
        """First query slice holding the episode's organ; the first slice when none does."""
        for query in self.query:
            if query.label.numpy().any():
                return query
        return self.query[0]


@dataclass(frozen=True)
class EvalTask:
    support: tuple
    query_volume: object


def support_slice_order(annotated):
    """Slice indices by foreground area, descending, ties to the lowest z."""
    areas = foreground_areas(annotated.mask)
    return np.lexsort((np.arange(len(areas)), -areas))


def build_support(annotated, cfg):
    """A full + B box shots from the top-(A+B) slices of one patient's record."""
    order = support_slice_order(annotated)
    shots = []
    for rank in range(cfg.shots):
        z = int(order[rank % len(order)])
        foreground = annotated.mask.labels[z] > 0
        if rank < cfg.shots_full:
            kind, annotation = VolumeKind.FULL, foreground
        else:
            kind, annotation = VolumeKind.BOX, slice_bounding_box(foreground)
        shots.append(SupportShot(
            image=Tensor(annotated.volume.voxels[z][None]),
            annotation=Tensor(annotation[None]),
            kind=kind,
            patient_id=annotated.patient_id,
            z=z,
        ))
    return tuple(shots)


def _query_slice(annotated, z):
    return QuerySlice(
        image=Tensor(annotated.volume.voxels[z][None]),
        label=Tensor((annotated.mask.labels[z] > 0)[None]),
        patient_id=annotated.patient_id,
        z=int(z),
    )


class EpisodeSampler:
    """Deterministic episode source for one fold's training classes."""

    def __init__(self, fold, data, cfg):
        if not fold.train_classes:
            raise ConfigurationError(f"fold {fold.test_class} has no train classes")
        self.fold = fold
        self.cfg = cfg
        # The held-out class never enters the index.
        self.records = {}
        for record in data:
            if record.class_id in fold.train_classes:
                self.records[(record.class_id, record.patient_id)] = record
        self.patients = {}
        for class_id in fold.train_classes:
            patients = sorted(p for (k, p) in self.records if k == class_id)
            if len(patients) < 2:
                raise EpisodeSamplingError(
                    f"class {class_id} has {len(patients)} patient(s); support and query need two"
                )
            self.patients[class_id] = patients
        self._support_cache = {}

    def _support(self, record):
        key = (record.class_id, record.patient_id)
        if key not in self._support_cache:
            self._support_cache[key] = build_support(record, self.cfg)
        return self._support_cache[key]

    def sample(self, index):
        rng = np.random.default_rng([self.cfg.seed, self.fold.test_class, index])
        class_id = self.fold.train_classes[int(rng.integers(len(self.fold.train_classes)))]
        patients = self.patients[class_id]
        support_patient = patients[int(rng.integers(len(patients)))]
        support = self._support(self.records[(class_id, support_patient)])

        others = [p for p in patients if p != support_patient]
        query = []
        for _ in range(self.cfg.query_size):
            record = self.records[(class_id, others[int(rng.integers(len(others)))])]
            depth = record.dims[0]
            if rng.random() < self.cfg.fg_slice_prob:
                candidates = np.flatnonzero(foreground_areas(record.mask))
                z = candidates[int(rng.integers(len(candidates)))] if candidates.size else int(rng.integers(depth))
            else:
                z = int(rng.integers(depth))
            query.append(_query_slice(record, z))

        episode = Episode(index=index, class_id=class_id, support=support, query=tuple(query))
        logger.debug(f"episode {index}: class {class_id}, support patient {support_patient}")
        return episode

    def __iter__(self):
        index = 0
        while True:
            yield self.sample(index)
            index += 1


def sample_episode(fold, data, cfg, index):
    return EpisodeSampler(fold, data, cfg).sample(index)


def eval_tasks(fold, data, cfg):
    """One task per query patient of the test class, sharing one support set."""
    records = {r.patient_id: r for r in data if r.class_id == fold.test_class}
    if fold.support_patient not in records:
        raise EpisodeSamplingError(
            f"support patient {fold.support_patient} has no record of class {fold.test_class}"
        )
    support = build_support(records[fold.support_patient], cfg)
    return [
        EvalTask(support=support, query_volume=records[patient])
        for patient in fold.query_patients
        if patient in records
    ]
