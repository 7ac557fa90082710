"""
Hold-one-class-out folds: each class is the unseen test class exactly once.
"""
from dataclasses import dataclass

from utils.exceptions import ConfigurationError

SUPPORT_PATIENT = 0


@dataclass(frozen=True)
class FoldSpec:
    test_class: int
    train_classes: tuple
    support_patient: int
    query_patients: tuple

    def __post_init__(self):
        if self.test_class in self.train_classes:
            raise ConfigurationError(f"test class {self.test_class} is also a train class")
        if self.support_patient in self.query_patients:
            raise ConfigurationError(f"support patient {self.support_patient} is also a query patient")


def make_folds(n_classes, n_patients):
    """One fold per class id 1..n_classes; patient 0 supplies eval supports."""
    if n_classes < 2:
        raise ConfigurationError(f"hold-one-class-out needs at least 2 classes, got {n_classes}")
    if n_patients < 2:
        raise ConfigurationError(f"need a support patient and at least one query patient, got {n_patients}")
    classes = tuple(range(1, n_classes + 1))
    query_patients = tuple(p for p in range(n_patients) if p != SUPPORT_PATIENT)
    return [
        FoldSpec(
            test_class=k,
            train_classes=tuple(c for c in classes if c != k),
            support_patient=SUPPORT_PATIENT,
            query_patients=query_patients,
        )
        for k in classes
    ]


def fold_for_class(n_classes, n_patients, test_class):
    for fold in make_folds(n_classes, n_patients):
        if fold.test_class == test_class:
            return fold
    raise ConfigurationError(f"test class {test_class} is not one of 1..{n_classes}")
