# ============================================================================
# 📌 EVALUATION TESTS: dice, cost ratio, reports, prediction, previews
# ============================================================================

import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from PIL import Image

from episodes.folds import fold_for_class
from episodes.sampler import EpisodeConfig, eval_tasks
from segmentation.config import ModelConfig
from segmentation.network import init_params
from segmentation.objectives import PrototypeRegistry
from utils.exceptions import ConfigurationError, DataError, ShapeError
from volumes.phantoms import generate_phantoms
from volumes.records import LabelMask, PhantomSpec, VolumeKind

from .metrics import annotation_cost_ratio, dice, summarize
from .previews import MISSED, OVERLAP, PREDICTION, preview_slice, save_volume_previews
from .services import (
    ARM_SS_FSL, ClusteringProbe, DiceReport, ReportFormatError, evaluate_fold, predict_volume,
    probe_prototype_clustering,
)

TINY = ModelConfig(levels=2, base_channels=2, proto_dim=4, input_size=(32, 32))
DATA = generate_phantoms(PhantomSpec(n_classes=3, n_patients=4, dims=(16, 32, 32), seed=3))


def voxel_count_dice(a, b):
    """Set-of-coordinates dice, independent of the numpy implementation."""
    p = set(zip(*np.nonzero(a)))
    t = set(zip(*np.nonzero(b)))
    if not p and not t:
        return 1.0
    return 2 * len(p & t) / (len(p) + len(t))


# ============================================================================
# TEST 1: DICE + COST
# ============================================================================
class DiceTests(SimpleTestCase):
    """
    🎯 PURPOSE: Dice equals a voxel-set oracle
    WHY: Every reported number is a dice score
    """

    def test_reference_cases(self):
        a = np.zeros((2, 4, 4), dtype=np.uint8)
        a[0, 0, :4] = 1
        self.assertEqual(dice(a, a), 1.0)
        b = np.zeros_like(a)
        b[1, 3, :4] = 1
        self.assertEqual(dice(a, b), 0.0)
        c = np.zeros_like(a)
        c[0, 0, 2:4] = 1
        c[0, 1, 0:2] = 1
        self.assertEqual(dice(a, c), 0.5)

    def test_both_empty(self):
        empty = np.zeros((3, 3, 3))
        self.assertEqual(dice(empty, empty), 1.0)

    def test_matches_voxel_oracle_and_is_symmetric(self):
        """
        📌 TEST: 100 random mask pairs
        EXPECTED: dice equals the voxel-set oracle exactly, both argument orders
        """
        rng = np.random.default_rng(0)
        for _ in range(100):
            shape = tuple(rng.integers(1, 6, size=3))
            a = rng.random(shape) < rng.random()
            b = rng.random(shape) < rng.random()
            self.assertEqual(dice(a, b), voxel_count_dice(a, b))
            self.assertEqual(dice(a, b), dice(b, a))
            self.assertEqual(dice(a, a), 1.0)

    def test_label_masks_use_foreground(self):
        labels = np.zeros((2, 3, 3), dtype=np.uint8)
        labels[0, 1, 1] = 3
        binary = (labels > 0).astype(np.uint8)
        self.assertEqual(dice(LabelMask(labels), LabelMask(binary)), 1.0)

    def test_extent_mismatch(self):
        with self.assertRaises(ShapeError):
            dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class AnnotationCostTests(SimpleTestCase):

    def test_weak_support_ratio(self):
        self.assertAlmostEqual(annotation_cost_ratio(300, 1, 3, 15), 250.0)
        self.assertAlmostEqual(annotation_cost_ratio(300, 1, 3), 250.0)

    def test_all_full_is_identity(self):
        for n in (1, 4, 37):
            self.assertEqual(annotation_cost_ratio(n, n, 0, 7), 1.0)

    def test_zero_support(self):
        with self.assertRaises(ConfigurationError):
            annotation_cost_ratio(300, 0, 0)
        with self.assertRaises(ConfigurationError):
            annotation_cost_ratio(300, 1, 3, 0)


# ============================================================================
# TEST 2: DICE REPORT
# ============================================================================
class DiceReportTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(1)
        self.scores = list(rng.random(19))
        self.report = DiceReport(class_id=2, arm=ARM_SS_FSL, digest="d" * 64,
                                 entries=list(zip(range(1, 20), self.scores)))

    def test_median_matches_sort_oracle(self):
        ordered = sorted(self.scores)
        self.assertAlmostEqual(self.report.median, ordered[9])
        self.assertAlmostEqual(self.report.mean, sum(self.scores) / 19)
        mean, median = summarize([0.2, 0.4, 0.9, 0.1])
        self.assertAlmostEqual(mean, 0.4)
        self.assertAlmostEqual(median, 0.3)

    def test_remove_and_readd(self):
        mean, median = self.report.mean, self.report.median
        score = dict(self.report.entries)[7]
        self.report.remove(7)
        self.assertEqual(len(self.report.entries), 18)
        self.report.add(7, score)
        self.assertAlmostEqual(self.report.mean, mean)
        self.assertAlmostEqual(self.report.median, median)

    def test_json_round_trip(self):
        text = self.report.to_json()
        loaded = DiceReport.from_json(text)
        self.assertEqual(loaded.entries, self.report.entries)
        self.assertEqual((loaded.class_id, loaded.arm, loaded.digest), (2, ARM_SS_FSL, "d" * 64))
        self.assertEqual(json.loads(text)["dice"][0], {"patient_id": 1, "dice": self.scores[0]})

    def test_rejects_bad_documents(self):
        data = self.report.to_dict()
        data["extra"] = 1
        with self.assertRaises(ReportFormatError):
            DiceReport.from_dict(data)
        data = self.report.to_dict()
        data["mean"] = 0.0 if data["mean"] > 0.1 else 0.9
        with self.assertRaises(ReportFormatError):
            DiceReport.from_dict(data)
        with self.assertRaises(ReportFormatError):
            DiceReport.from_json("not json")

    def test_scores_stay_in_unit_interval(self):
        with self.assertRaises(DataError):
            self.report.add(30, 1.5)
        with self.assertRaises(ConfigurationError):
            DiceReport(class_id=1, arm="UBM")


# ============================================================================
# TEST 3: PREDICTION + FOLD EVALUATION
# ============================================================================
class PredictVolumeTests(SimpleTestCase):

    def setUp(self):
        self.params = init_params(TINY, 0)
        self.fold = fold_for_class(3, 4, 2)
        self.task = eval_tasks(self.fold, DATA, EpisodeConfig())[0]

    def test_dims_kind_and_determinism(self):
        first = predict_volume(self.params, PrototypeRegistry(), self.task.support, self.task.query_volume)
        second = predict_volume(self.params, PrototypeRegistry(), self.task.support, self.task.query_volume)
        self.assertEqual(first.dims, self.task.query_volume.dims)
        self.assertEqual(first.kind, VolumeKind.FULL)
        self.assertEqual(first, second)
        self.assertTrue(set(np.unique(first.labels)) <= {0, 1})

    def test_volume_dice_equals_concatenated_slices(self):
        prediction = predict_volume(self.params, PrototypeRegistry(), self.task.support,
                                    self.task.query_volume, threshold=0.5)
        truth = self.task.query_volume.mask
        flat_pred = np.concatenate([prediction.labels[z].ravel() for z in range(prediction.dims[0])])
        flat_truth = np.concatenate([truth.labels[z].ravel() for z in range(truth.dims[0])])
        self.assertEqual(dice(prediction, truth), voxel_count_dice(flat_pred, flat_truth))

    def test_threshold_extremes(self):
        """
        📌 TEST: Binarisation at threshold 0 and above 1
        EXPECTED: All foreground, then all background
        """
        everything = predict_volume(self.params, None, self.task.support, self.task.query_volume, threshold=0.0)
        self.assertTrue(everything.labels.all())
        nothing = predict_volume(self.params, None, self.task.support, self.task.query_volume, threshold=1.01)
        self.assertFalse(nothing.labels.any())

    def test_bad_inputs(self):
        with self.assertRaises(ConfigurationError):
            predict_volume(self.params, None, (), self.task.query_volume)
        wide = init_params(ModelConfig(levels=2, base_channels=2, proto_dim=4, input_size=(64, 64)), 0)
        with self.assertRaises(ShapeError):
            predict_volume(wide, None, self.task.support, self.task.query_volume)


class EvaluateFoldTests(SimpleTestCase):
    """
    📊 PURPOSE: Fold evaluation covers every query patient with the right support
    WHY: The arm decides which annotations the model may see
    """

    def test_oracle_predictor_scores_one_per_query_patient(self):
        """
        📌 TEST: A predictor that returns the truth
        EXPECTED: 19 entries, all dice 1.0
        """
        data = generate_phantoms(PhantomSpec(n_classes=2, n_patients=20, dims=(16, 32, 32), seed=5))
        fold = fold_for_class(2, 20, 1)
        report = evaluate_fold(
            fold, data, None, None, EpisodeConfig(),
            predictor=lambda support, annotated: annotated.mask, digest="abc",
        )
        self.assertEqual(len(report.entries), 19)
        self.assertEqual(report.mean, 1.0)
        self.assertEqual(report.median, 1.0)
        self.assertEqual([p for p, _ in report.entries], list(range(1, 20)))
        self.assertEqual(report.digest, "abc")

    def test_arm_selects_support_kinds(self):
        fold = fold_for_class(3, 4, 3)
        seen = []

        def spy(support, annotated):
            seen.append(tuple(shot.kind for shot in support))
            return annotated.mask

        evaluate_fold(fold, DATA, None, None, EpisodeConfig(), predictor=spy)
        evaluate_fold(fold, DATA, None, None, EpisodeConfig(), predictor=spy, arm=ARM_SS_FSL)
        self.assertEqual(seen[0], (VolumeKind.FULL,) * 4)
        self.assertEqual(seen[-1], (VolumeKind.FULL,) + (VolumeKind.BOX,) * 3)

    def test_network_predictions_are_finite_and_written(self):
        fold = fold_for_class(3, 4, 1)
        with tempfile.TemporaryDirectory() as tmp:
            report = evaluate_fold(fold, DATA, init_params(TINY, 1), PrototypeRegistry(), EpisodeConfig(),
                                   threshold=0.0, preview_dir=tmp)
            self.assertEqual(len(report.entries), 3)
            self.assertTrue(all(0.0 <= score <= 1.0 for score in report.scores))
            self.assertTrue(list(Path(tmp).glob("patient001_z*.pgm")))


class ClusteringProbeTests(SimpleTestCase):

    def test_fraction_positive(self):
        probe = ClusteringProbe(margins=[0.2, -0.1, 0.0, 0.3])
        self.assertEqual(probe.fraction_positive, 0.5)
        self.assertAlmostEqual(probe.mean_margin, 0.1)

    def test_probe_counts_and_requirements(self):
        fold = fold_for_class(3, 4, 3)
        params = init_params(TINY, 2)
        registry = PrototypeRegistry()
        rng = np.random.default_rng(0)
        for class_id in fold.train_classes:
            registry.update(class_id, rng.normal(size=4))
        result = probe_prototype_clustering(fold, DATA, params, registry, EpisodeConfig(query_size=1), probes=5)
        self.assertEqual(len(result.margins), 5)
        self.assertTrue(0.0 <= result.fraction_positive <= 1.0)
        single = PrototypeRegistry()
        single.update(1, np.ones(4))
        with self.assertRaises(ConfigurationError):
            probe_prototype_clustering(fold, DATA, params, single, EpisodeConfig())


# ============================================================================
# TEST 4: PREVIEWS
# ============================================================================
class PreviewTests(SimpleTestCase):

    def test_overlay_values(self):
        """
        📌 TEST: Every (prediction, truth) combination gets its own gray level
        EXPECTED: hit 255, false positive 128, missed organ 64, background 0
        """
        pred = np.array([[1, 1], [0, 0]])
        truth = np.array([[1, 0], [1, 0]])
        pixels = np.asarray(preview_slice(pred, truth))
        np.testing.assert_array_equal(pixels, [[OVERLAP, PREDICTION], [MISSED, 0]])

    def test_missed_organ_is_visible(self):
        truth = np.zeros((4, 4))
        truth[1:3, 1:3] = 1
        pixels = np.asarray(preview_slice(np.zeros((4, 4)), truth))
        self.assertEqual(int((pixels == MISSED).sum()), 4)
        self.assertEqual(set(np.unique(pixels)), {0, MISSED})

    def test_writes_binary_pgm(self):
        labels = np.zeros((3, 4, 4), dtype=np.uint8)
        labels[1, 1:3, 1:3] = 1
        mask = LabelMask(labels)
        with tempfile.TemporaryDirectory() as tmp:
            paths = save_volume_previews(tmp, 5, mask, mask)
            self.assertEqual([p.name for p in paths], ["patient005_z001.pgm"])
            self.assertTrue(paths[0].read_bytes().startswith(b"P5"))
            with Image.open(paths[0]) as image:
                self.assertEqual(image.mode, "L")
                self.assertEqual(set(np.unique(np.asarray(image))), {0, OVERLAP})
