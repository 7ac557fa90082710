# ============================================================================
# 📌 EPISODE TESTS: folds, training episodes and evaluation tasks
# ============================================================================

from collections import Counter

import numpy as np
from django.test import SimpleTestCase

from autograd.tensor import Tensor
from utils.exceptions import ConfigurationError
from volumes.phantoms import generate_phantoms
from volumes.records import PhantomSpec, VolumeKind

from .folds import fold_for_class, make_folds
from .sampler import (
    Episode, EpisodeConfig, EpisodeSampler, EpisodeSamplingError, QuerySlice, eval_tasks, sample_episode,
)

DATA = generate_phantoms(PhantomSpec(n_classes=3, n_patients=4, dims=(16, 32, 32), seed=1))


class FoldTests(SimpleTestCase):

    def test_four_classes_give_four_folds(self):
        """
        📌 TEST: Folds over 4 classes x 20 patients
        EXPECTED: One fold per class, patient 0 supports, 19 queries
        """
        folds = make_folds(4, 20)
        self.assertEqual([f.test_class for f in folds], [1, 2, 3, 4])
        for fold in folds:
            self.assertNotIn(fold.test_class, fold.train_classes)
            self.assertEqual(len(fold.query_patients), 19)
            self.assertEqual(fold.support_patient, 0)

    def test_two_classes_train_on_one(self):
        for fold in make_folds(2, 5):
            self.assertEqual(len(fold.train_classes), 1)

    def test_single_class_rejected(self):
        with self.assertRaises(ConfigurationError):
            make_folds(1, 5)
        with self.assertRaises(ConfigurationError):
            fold_for_class(4, 20, 9)


class EpisodeSamplerTests(SimpleTestCase):
    """
    🎲 PURPOSE: Training episodes keep class isolation and reproducibility
    WHY: A leaked held-out class would inflate every dice score
    """

    def setUp(self):
        self.fold = fold_for_class(3, 4, 3)
        self.cfg = EpisodeConfig(shots_full=1, shots_weak=3, query_size=4, seed=11)

    def test_semi_supervised_kinds(self):
        episode = sample_episode(self.fold, DATA, self.cfg, 0)
        self.assertEqual(episode.kinds, [VolumeKind.FULL, VolumeKind.BOX, VolumeKind.BOX, VolumeKind.BOX])
        self.assertEqual(len(episode.query), 4)

    def test_fully_supervised_arm(self):
        cfg = EpisodeConfig(shots_full=4, shots_weak=0, seed=11)
        self.assertEqual(sample_episode(self.fold, DATA, cfg, 0).kinds, [VolumeKind.FULL] * 4)
        arm = self.cfg.for_arm(False)
        self.assertEqual((arm.shots_full, arm.shots_weak), (4, 0))
        self.assertIs(self.cfg.for_arm(True), self.cfg)

    def test_same_index_same_episode(self):
        first = sample_episode(self.fold, DATA, self.cfg, 17)
        second = sample_episode(self.fold, DATA, self.cfg, 17)
        self.assertEqual(first.class_id, second.class_id)
        for a, b in zip(first.query, second.query):
            self.assertEqual((a.patient_id, a.z), (b.patient_id, b.z))
            np.testing.assert_array_equal(a.image.numpy(), b.image.numpy())
        for a, b in zip(first.support, second.support):
            np.testing.assert_array_equal(a.annotation.numpy(), b.annotation.numpy())

    def test_isolation_and_disjointness(self):
        """
        📌 TEST: 200 training episodes of one fold
        EXPECTED: Never the held-out class, never a patient in both support and query
        """
        sampler = EpisodeSampler(self.fold, DATA, self.cfg)
        for index in range(200):
            episode = sampler.sample(index)
            self.assertNotEqual(episode.class_id, self.fold.test_class)
            support_patients = {shot.patient_id for shot in episode.support}
            query_patients = {q.patient_id for q in episode.query}
            self.assertFalse(support_patients & query_patients)

    def test_class_frequency_is_uniform(self):
        sampler = EpisodeSampler(self.fold, DATA, EpisodeConfig(query_size=1, seed=3))
        counts = Counter(sampler.sample(i).class_id for i in range(1000))
        for class_id in self.fold.train_classes:
            self.assertAlmostEqual(counts[class_id] / 1000, 0.5, delta=0.05)

    def test_weak_annotations_cover_full_mask(self):
        episode = sample_episode(self.fold, DATA, self.cfg, 5)
        record = next(r for r in DATA if r.class_id == episode.class_id and r.patient_id == episode.support[0].patient_id)
        for shot in episode.support:
            full = record.mask.labels[shot.z] > 0
            annotation = shot.annotation.numpy()[0]
            self.assertTrue(set(np.unique(annotation)) <= {0.0, 1.0})
            self.assertTrue(np.all(annotation[full] == 1.0))

    def test_support_uses_largest_slices(self):
        episode = sample_episode(self.fold, DATA, self.cfg, 2)
        record = next(r for r in DATA if r.class_id == episode.class_id and r.patient_id == episode.support[0].patient_id)
        areas = (record.mask.labels > 0).sum(axis=(1, 2))
        chosen = [shot.z for shot in episode.support]
        self.assertEqual(areas[chosen[0]], areas.max())
        self.assertEqual(sorted(areas[chosen], reverse=True), list(areas[chosen]))

    def test_single_patient_class_rejected(self):
        data = [r for r in DATA if not (r.class_id == 1 and r.patient_id > 0)]
        with self.assertRaises(EpisodeSamplingError):
            EpisodeSampler(self.fold, data, self.cfg)

    def test_invalid_config_rejected(self):
        with self.assertRaises(ConfigurationError):
            EpisodeConfig(shots_full=0, shots_weak=0)
        with self.assertRaises(ConfigurationError):
            EpisodeConfig(query_size=0)


# ============================================================================
# TEST: ANCHOR SLICE - the query image that feeds episode prototypes
# ============================================================================
class EpisodeAnchorTests(SimpleTestCase):
    """
    🎯 PURPOSE: Prototypes are built from a query slice that shows the organ
    WHY: An organ-free slice gives a prototype with no class signal
    """

    @staticmethod
    def _slice(z, organ):
        label = np.zeros((1, 32, 32))
        if organ:
            label[0, 10:14, 12:18] = 1.0
        return QuerySlice(image=Tensor(np.full((1, 32, 32), 0.5)), label=Tensor(label), patient_id=1, z=z)

    def test_anchor_skips_organ_free_slices(self):
        """
        📌 TEST: Organ-free first slice, organ in the second
        EXPECTED: The second slice is the anchor
        """
        empty, organ = self._slice(0, False), self._slice(1, True)
        episode = Episode(index=0, class_id=1, support=(), query=(empty, organ, self._slice(2, True)))
        self.assertIs(episode.anchor, organ)

    def test_anchor_falls_back_to_first_slice(self):
        """
        📌 TEST: No query slice holds the organ
        EXPECTED: The first slice is the anchor
        """
        first = self._slice(0, False)
        episode = Episode(index=0, class_id=1, support=(), query=(first, self._slice(1, False)))
        self.assertIs(episode.anchor, first)

    def test_sampled_anchor_holds_foreground_when_any_slice_does(self):
        sampler = EpisodeSampler(fold_for_class(3, 4, 3), DATA, EpisodeConfig(query_size=4, seed=5))
        for index in range(100):
            episode = sampler.sample(index)
            # 🔍 CHECK: Any organ slice in the query makes the anchor an organ slice
            if any(q.label.numpy().any() for q in episode.query):
                self.assertTrue(episode.anchor.label.numpy().any())
            else:
                self.assertIs(episode.anchor, episode.query[0])


class EvalTaskTests(SimpleTestCase):

    def test_one_task_per_query_patient(self):
        data = generate_phantoms(PhantomSpec(n_classes=2, n_patients=20, dims=(16, 32, 32), seed=2))
        fold = fold_for_class(2, 20, 1)
        tasks = eval_tasks(fold, data, EpisodeConfig())
        self.assertEqual(len(tasks), 19)
        self.assertNotIn(fold.support_patient, [t.query_volume.patient_id for t in tasks])
        self.assertTrue(all(t.query_volume.class_id == 1 for t in tasks))
        self.assertEqual([s.kind for s in tasks[0].support], [VolumeKind.FULL] + [VolumeKind.BOX] * 3)

    def test_tasks_repeat_exactly(self):
        fold = fold_for_class(3, 4, 2)
        first, second = eval_tasks(fold, DATA, EpisodeConfig()), eval_tasks(fold, DATA, EpisodeConfig())
        self.assertEqual([t.query_volume.patient_id for t in first], [t.query_volume.patient_id for t in second])
        for a, b in zip(first[0].support, second[0].support):
            self.assertEqual(a.z, b.z)
            np.testing.assert_array_equal(a.annotation.numpy(), b.annotation.numpy())
