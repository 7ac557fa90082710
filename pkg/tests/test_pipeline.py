"""
End-to-end flows at toy scale: generate -> write/load -> train -> evaluate.
"""
import shutil
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from evaluation.services import ARM_FSL, DiceReport
from experiments.forms import parse_run_config
from experiments.services import ExperimentService
from segmentation.trainer import TrainLog, log_path_for
from volumes.phantoms import generate_phantoms
from volumes.records import PhantomSpec
from volumes.services import DatasetService

TOY_RUN = {
    "model": {"levels": 2, "base_channels": 2, "proto_dim": 4, "input_size": [32, 32]},
    "episodes": {"query_size": 2},
    "train": {"episodes": 3, "lr": 0.01, "seed": 2},
}


class PipelineTest(SimpleTestCase):
    """Complete generate-train-evaluate flow through the service layer"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        spec = PhantomSpec(n_classes=3, n_patients=4, dims=(16, 32, 32), seed=21)
        DatasetService.write(cls.tmp / "data", generate_phantoms(spec), spec)
        cls.records = DatasetService.load(cls.tmp / "data")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    def test_generate_train_evaluate(self):
        run_config = parse_run_config(TOY_RUN)
        checkpoint_path = self.tmp / "fold3.fspm"

        # 1. Train with class 3 held out
        result = ExperimentService.train(self.records, run_config, 3, checkpoint_path)
        self.assertEqual(len(result.log.records), 3)
        self.assertNotIn(3, result.registry.classes)

        # 2. The log on disk matches the in-memory one
        on_disk = TrainLog.read_jsonl(log_path_for(checkpoint_path))
        self.assertEqual(on_disk.loss_trace(), result.log.loss_trace())

        # 3. Reload through the guarded path and evaluate
        checkpoint, loaded_config = ExperimentService.load_trained(checkpoint_path, 3)
        self.assertTrue(checkpoint.params.equals(result.params))
        self.assertEqual(loaded_config, run_config)
        report_path = self.tmp / "fold3.json"
        report = ExperimentService.evaluate(self.records, checkpoint, loaded_config, 3, report_path)

        self.assertEqual(len(report.entries), 3)
        self.assertEqual(report.arm, ARM_FSL)
        self.assertEqual(DiceReport.from_json(report_path.read_text()).entries, report.entries)

    def test_two_runs_produce_identical_checkpoints(self):
        run_config = parse_run_config(TOY_RUN).with_arm(True)
        first = ExperimentService.train(self.records, run_config, 1, self.tmp / "r1.fspm")
        second = ExperimentService.train(self.records, run_config, 1, self.tmp / "r2.fspm")
        self.assertEqual(first.log.loss_trace(), second.log.loss_trace())
        self.assertEqual((self.tmp / "r1.fspm").read_bytes(), (self.tmp / "r2.fspm").read_bytes())

    def test_cost_ratio_counts_foreground_slices(self):
        run_config = parse_run_config(TOY_RUN)
        full_shot = ExperimentService.full_shot_annotations(self.records, 2)
        self.assertGreater(full_shot, 0)
        self.assertAlmostEqual(ExperimentService.cost_ratio(self.records, run_config, 2), full_shot / 4)
        self.assertAlmostEqual(ExperimentService.cost_ratio(self.records, run_config.with_arm(True), 2),
                               full_shot / 1.2)


class TrainingSmokeTest(SimpleTestCase):
    """Single training class: the segmentation loss must come down"""

    def test_weighted_ce_halves(self):
        """
        📌 TEST: 120 episodes on a single training class
        EXPECTED: Mean WCE over the last 20 episodes is below half the first 20
        """
        spec = PhantomSpec(n_classes=2, n_patients=3, dims=(16, 32, 32), seed=4)
        records = generate_phantoms(spec)
        run_config = parse_run_config({
            "model": {"levels": 2, "base_channels": 4, "proto_dim": 8, "input_size": [32, 32]},
            "episodes": {"query_size": 4},
            "train": {"episodes": 120, "lr": 0.01, "seed": 0},
        })
        result = ExperimentService.train(records, run_config, 2)
        self.assertEqual(result.registry.classes, [1])
        self.assertTrue(all(r.nn_loss == 0.0 for r in result.log.records))
        early = result.log.mean_wce(0, 20)
        late = result.log.mean_wce(100, 120)
        self.assertTrue(np.isfinite(early) and np.isfinite(late))
        self.assertLess(late, 0.5 * early)
