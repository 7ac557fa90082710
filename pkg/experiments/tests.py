# ============================================================================
# 📌 EXPERIMENT TESTS: run config, management commands, results ledger
# ============================================================================

import io
import json
import shutil
import tempfile
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from autograd.gradcheck import GRADIENT_CASES
from evaluation.services import ARM_FSL, ARM_SS_FSL, DiceReport
from segmentation.checkpoints import load_checkpoint, save_checkpoint
from segmentation.network import init_params
from utils.exceptions import ConfigurationError, DataError
from volumes.formats import read_volume
from volumes.records import LabelMask, VolumeKind

from .forms import RunConfig, load_run_config, parse_run_config, parse_run_config_text
from .models import FoldEvaluation, TrainingRun
from .services import ExperimentService

TOY_CONFIG = {
    "model": {"levels": 2, "base_channels": 2, "proto_dim": 4, "input_size": [32, 32]},
    "episodes": {"query_size": 2, "seed": 1},
    "train": {"episodes": 2, "lr": 0.01, "seed": 3},
}


def run(*args):
    out = io.StringIO()
    call_command(*args, stdout=out, stderr=io.StringIO())
    return out.getvalue()


class ToyWorkspaceMixin:
    """Three classes x three patients of 16x32x32 phantoms plus a toy config file."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.data = cls.tmp / "data"
        run("gen_phantoms", "--out", str(cls.data), "--classes", "3", "--patients", "3",
            "--size", "32", "--depth", "16", "--seed", "11")
        cls.config = cls.write_config("toy.json", TOY_CONFIG)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    @classmethod
    def write_config(cls, name, document):
        path = cls.tmp / name
        path.write_text(json.dumps(document))
        return str(path)


# ============================================================================
# TEST 1: RUN CONFIG
# ============================================================================
class RunConfigTests(SimpleTestCase):
    """
    📝 PURPOSE: Run-config validation, canonical form and digest
    WHY: The digest guards every checkpoint against a config swap
    """

    def test_empty_document_is_all_defaults(self):
        self.assertEqual(parse_run_config({}), RunConfig())
        self.assertEqual(load_run_config(None).digest, RunConfig().digest)

    def test_canonical_round_trip(self):
        config = parse_run_config(TOY_CONFIG)
        again = parse_run_config_text(config.canonical_json())
        self.assertEqual(again, config)
        self.assertEqual(again.digest, config.digest)
        self.assertEqual(config.model.input_size, (32, 32))
        self.assertEqual(config.train.episodes, 2)
        self.assertNotIn(" ", config.canonical_json())

    def test_digest_tracks_values_and_arm(self):
        """
        📌 TEST: Digests of configs that differ in one value or the arm
        EXPECTED: Three different digests, each 64 hex characters long
        """
        base = parse_run_config(TOY_CONFIG)
        changed = parse_run_config({**TOY_CONFIG, "loss": {"temperature": 2.0}})
        self.assertNotEqual(base.digest, changed.digest)
        self.assertNotEqual(base.digest, base.with_arm(True).digest)
        self.assertEqual(len(base.digest), 64)

    def test_unknown_sections_and_keys(self):
        with self.assertRaises(ConfigurationError):
            parse_run_config({"optimizer": {}})
        with self.assertRaisesRegex(ConfigurationError, "unknown keys: dropout"):
            parse_run_config({"model": {"dropout": 0.1}})

    def test_field_validation(self):
        bad_documents = [
            {"model": {"levels": "four"}},
            {"model": {"levels": 1}},
            {"model": {"input_size": [32]}},
            {"model": {"input_size": None}},
            {"episodes": {"query_size": 0}},
            {"episodes": {"fg_slice_prob": 1.5}},
            {"train": {"optimizer": "rmsprop"}},
            {"train": {"lr": -1}},
            {"loss": {"beta_mode": "median"}},
            {"train": []},
            [],
        ]
        for document in bad_documents:
            with self.assertRaises(ConfigurationError, msg=str(document)):
                parse_run_config(document)

    def test_record_invariants_still_apply(self):
        with self.assertRaises(ConfigurationError):
            parse_run_config({"model": {"levels": 4, "input_size": [40, 40]}})
        with self.assertRaises(ConfigurationError):
            parse_run_config({"loss": {"temperature": 0}})

    def test_bad_json_text(self):
        with self.assertRaises(ConfigurationError):
            parse_run_config_text("{model:")
        with self.assertRaises(ConfigurationError):
            load_run_config("/nonexistent/run.json")


# ============================================================================
# TEST 2: COMMANDS
# ============================================================================
class CostCommandTests(SimpleTestCase):

    def test_ratios(self):
        self.assertEqual(run("cost", "--full-shot", "300", "--support-full", "1", "--support-weak", "3").strip(),
                         "250.0")
        self.assertEqual(run("cost", "--full-shot", "4", "--support-full", "4", "--support-weak", "0",
                             "--weak-factor", "3").strip(), "1.0")

    def test_zero_support_exits_with_usage_code(self):
        with self.assertRaises(CommandError) as ctx:
            run("cost", "--full-shot", "300", "--support-full", "0", "--support-weak", "0")
        self.assertEqual(ctx.exception.returncode, 2)


class GradcheckCommandTests(SimpleTestCase):

    def test_every_op_listed_once_and_passes(self):
        output = run("gradcheck", "--seed", "0")
        rows = [line.split()[0] for line in output.splitlines()[2:] if line.strip() and not line.startswith("✅")]
        self.assertEqual(sorted(rows), sorted(list(GRADIENT_CASES) + ["model[16x16]"]))
        self.assertIn("All 18 gradient checks passed", output)


class TrainEvalPredictCommandTests(ToyWorkspaceMixin, SimpleTestCase):
    """
    ⌨️ PURPOSE: train / eval / predict through call_command
    WHY: Exit codes are the contract with shell scripts
    """

    def train(self, name, *extra, config=None):
        out = self.tmp / name
        run("train", "--data", str(self.data), "--test-class", "1", "--config", config or self.config,
            "--out", str(out), *extra)
        return out

    def test_train_writes_checkpoint_and_log(self):
        path = self.train("fsl.fspm")
        self.assertTrue(path.exists())
        log_lines = Path(str(path) + ".log.jsonl").read_text().splitlines()
        self.assertEqual([json.loads(line)["episode"] for line in log_lines], [0, 1])
        checkpoint = load_checkpoint(path)
        self.assertEqual(checkpoint.meta_text("test_class"), "1")
        config = parse_run_config_text(checkpoint.meta_text("config"))
        self.assertFalse(config.train.weak_support)
        self.assertEqual(checkpoint.meta_text("digest"), config.digest)

    def test_weak_support_flag_selects_arm(self):
        checkpoint = load_checkpoint(self.train("ss.fspm", "--weak-support"))
        self.assertTrue(parse_run_config_text(checkpoint.meta_text("config")).train.weak_support)

    def test_reruns_are_byte_identical(self):
        first = self.train("a.fspm")
        second = self.train("b.fspm")
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_zero_episodes_is_init(self):
        document = {**TOY_CONFIG, "train": {"episodes": 0, "seed": 5}}
        path = self.train("zero.fspm", config=self.write_config("zero.json", document))
        model_cfg = parse_run_config(document).model
        self.assertTrue(load_checkpoint(path).params.equals(init_params(model_cfg, 5)))

    def test_train_failures_map_to_exit_codes(self):
        with self.assertRaises(CommandError) as ctx:
            self.train("x.fspm", config=str(self.tmp / "missing.json"))
        self.assertEqual(ctx.exception.returncode, 2)
        with self.assertRaises(CommandError) as ctx:
            run("train", "--data", str(self.tmp / "nowhere"), "--test-class", "1",
                "--config", self.config, "--out", str(self.tmp / "x.fspm"))
        self.assertEqual(ctx.exception.returncode, 3)
        with self.assertRaises(CommandError) as ctx:
            run("train", "--data", str(self.data), "--test-class", "7",
                "--config", self.config, "--out", str(self.tmp / "x.fspm"))
        self.assertEqual(ctx.exception.returncode, 2)
        mismatched = {**TOY_CONFIG, "model": {**TOY_CONFIG["model"], "input_size": [64, 64]}}
        with self.assertRaises(CommandError) as ctx:
            self.train("x.fspm", config=self.write_config("wide.json", mismatched))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_unwritable_out_exits_with_data_code(self):
        """
        📌 TEST: --out points below a regular file
        EXPECTED: Exit code 3 (data), no raw OSError traceback
        """
        blocker = self.tmp / "blocker"
        blocker.write_text("not a directory")
        with self.assertRaises(CommandError) as ctx:
            self.train("blocker/m.fspm")
        self.assertEqual(ctx.exception.returncode, 3)

    def test_eval_writes_report(self):
        path = self.train("evalme.fspm")
        report_path = self.tmp / "report.json"
        pgm = self.tmp / "pgm"
        output = run("eval", "--data", str(self.data), "--model", str(path), "--test-class", "1",
                     "--report", str(report_path), "--pgm", str(pgm))
        report = DiceReport.from_json(report_path.read_text())
        self.assertEqual(len(report.entries), 2)
        self.assertEqual(report.arm, ARM_FSL)
        self.assertEqual(report.digest, load_checkpoint(path).meta_text("digest"))
        self.assertTrue(all(0.0 <= score <= 1.0 for score in report.scores))
        self.assertIn("mean", output)
        self.assertTrue(pgm.is_dir())

    def test_eval_refuses_mismatches(self):
        """
        📌 TEST: eval with the wrong class or a tampered digest
        EXPECTED: CommandError with exit code 2
        """
        path = self.train("guarded.fspm")
        with self.assertRaises(CommandError) as ctx:
            run("eval", "--data", str(self.data), "--model", str(path), "--test-class", "2",
                "--report", str(self.tmp / "r.json"))
        self.assertEqual(ctx.exception.returncode, 2)

        checkpoint = load_checkpoint(path)
        tampered = self.tmp / "tampered.fspm"
        save_checkpoint(checkpoint.params, checkpoint.registry, tampered, {
            "config": checkpoint.meta_text("config"), "digest": "0" * 64, "test_class": 1,
        })
        with self.assertRaises(CommandError) as ctx:
            run("eval", "--data", str(self.data), "--model", str(tampered), "--test-class", "1",
                "--report", str(self.tmp / "r.json"))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_predict_writes_full_mask(self):
        path = self.train("predict.fspm")
        query = str(self.data / "class01" / "patient001_image.fsv")
        outputs = []
        for name in ("p1.fsv", "p2.fsv"):
            out = self.tmp / name
            run("predict", "--model", str(path), "--query", query,
                "--support-img", str(self.data / "class01" / "patient000_image.fsv"),
                "--support-mask", str(self.data / "class01" / "patient000_mask.fsv"),
                "--out", str(out))
            outputs.append(out)
        prediction = read_volume(outputs[0])
        self.assertIsInstance(prediction, LabelMask)
        self.assertEqual(prediction.kind, VolumeKind.FULL)
        self.assertEqual(prediction.dims, read_volume(query).dims)
        self.assertEqual(outputs[0].read_bytes(), outputs[1].read_bytes())

    def test_predict_rejects_swapped_inputs(self):
        path = self.train("swap.fspm")
        with self.assertRaises(CommandError) as ctx:
            run("predict", "--model", str(path),
                "--query", str(self.data / "class01" / "patient001_mask.fsv"),
                "--support-img", str(self.data / "class01" / "patient000_image.fsv"),
                "--support-mask", str(self.data / "class01" / "patient000_mask.fsv"),
                "--out", str(self.tmp / "bad.fsv"))
        self.assertEqual(ctx.exception.returncode, 3)


# ============================================================================
# TEST 3: RESULTS LEDGER
# ============================================================================
class ExperimentLedgerTests(ToyWorkspaceMixin, TestCase):
    """
    🗂️ PURPOSE: Fold experiments are recorded in the ledger, failures included
    WHY: A run stuck in RUNNING hides a crash
    """

    def test_run_fold_records_run_and_evaluation(self):
        document = {**TOY_CONFIG, "train": {**TOY_CONFIG["train"], "episodes": 6}}
        evaluation = ExperimentService.run_fold(str(self.data), document, 2, True, str(self.tmp / "runs"), probes=3)
        run_row = evaluation.run
        self.assertEqual(run_row.status, 'COMPLETED')
        self.assertEqual(run_row.arm, ARM_SS_FSL)
        self.assertEqual(run_row.digest, parse_run_config(document).with_arm(True).digest)
        self.assertEqual(len(evaluation.per_patient), 2)
        # Probed only when both train classes reached the registry.
        fraction = evaluation.clustering_fraction
        self.assertTrue(fraction is None or 0.0 <= fraction <= 1.0)
        self.assertTrue(Path(evaluation.report_path).exists())
        self.assertGreater(evaluation.cost_ratio, 0)

    def test_failed_run_is_recorded(self):
        """
        📌 TEST: run_fold for a class that does not exist
        EXPECTED: ConfigurationError and a FAILED ledger row without evaluation
        """
        with self.assertRaises(ConfigurationError):
            ExperimentService.run_fold(str(self.data), TOY_CONFIG, 9, False, str(self.tmp / "runs"))
        failed = TrainingRun.objects.get(test_class=9)
        self.assertEqual(failed.status, 'FAILED')
        self.assertIn("test class 9", failed.error_message)
        self.assertFalse(FoldEvaluation.objects.filter(run=failed).exists())

    def test_unwritable_out_dir_marks_run_failed(self):
        """
        📌 TEST: The fold directory cannot be created
        EXPECTED: DataError, and the ledger row ends FAILED instead of RUNNING
        """
        blocker = self.tmp / "ledger_blocker"
        blocker.write_text("not a directory")
        with self.assertRaises(DataError):
            ExperimentService.run_fold(str(self.data), TOY_CONFIG, 2, False, str(blocker))
        failed = TrainingRun.objects.get(test_class=2)
        self.assertEqual(failed.status, 'FAILED')
        self.assertIsNotNone(failed.finished_at)

    def test_unexpected_error_marks_run_failed(self):
        with mock.patch.object(ExperimentService, "train", side_effect=RuntimeError("worker lost")):
            with self.assertRaises(RuntimeError):
                ExperimentService.run_fold(str(self.data), TOY_CONFIG, 1, True, str(self.tmp / "crash"))
        failed = TrainingRun.objects.get(test_class=1)
        self.assertEqual(failed.status, 'FAILED')
        self.assertEqual(failed.error_message, "RuntimeError: worker lost")

    def test_summary_table(self):
        for test_class, arm, score in [(1, ARM_FSL, 0.4), (1, ARM_SS_FSL, 0.5), (2, ARM_FSL, 0.6)]:
            run_row = TrainingRun.objects.create(data_dir="d", config={}, digest="x", test_class=test_class, arm=arm)
            FoldEvaluation.objects.create(run=run_row, mean_dice=score, median_dice=score, cost_ratio=10.0)
        summary = ExperimentService.summarize(FoldEvaluation.objects.select_related('run'))
        self.assertEqual([row["class_id"] for row in summary["rows"]], [1, 2])
        self.assertAlmostEqual(summary["rows"][0]["difference"], 0.1)
        self.assertIsNone(summary["rows"][1]["difference"])
        self.assertAlmostEqual(summary["average"][ARM_FSL], 0.5)
        self.assertEqual(summary["cost"], {ARM_FSL: 10.0, ARM_SS_FSL: 10.0})

    def test_acceptance_checks_use_frozen_bounds(self):
        """
        📌 TEST: One fold per arm, recorded at the baseline figures, plus a weak fold
        EXPECTED: Baseline rows pass, the low-dice fold and the wide arm gap fail,
                  and the worst clustering fraction of each arm is judged
        """
        rows = [
            (1, ARM_FSL, 0.8707, 0.96), (1, ARM_SS_FSL, 0.8405, 1.0),
            (2, ARM_FSL, 0.70, 0.92), (2, ARM_SS_FSL, 0.45, 0.95),
        ]
        for test_class, arm, score, fraction in rows:
            run_row = TrainingRun.objects.create(data_dir="d", config={}, digest="x", test_class=test_class, arm=arm)
            FoldEvaluation.objects.create(run=run_row, mean_dice=score, median_dice=score, clustering_fraction=fraction)
        summary = ExperimentService.summarize(FoldEvaluation.objects.select_related('run'))
        self.assertEqual(summary["clustering"], {ARM_FSL: 0.92, ARM_SS_FSL: 0.95})

        # 🔍 CHECK: Every bound is reported with its verdict
        verdicts = {name: passed for name, _, _, passed in ExperimentService.acceptance_checks(summary)}
        self.assertTrue(verdicts[f"class 1 {ARM_FSL} mean dice"])
        self.assertTrue(verdicts["class 1 |SS-FSL - FSL|"])
        self.assertFalse(verdicts[f"class 2 {ARM_SS_FSL} mean dice"])
        self.assertFalse(verdicts["class 2 |SS-FSL - FSL|"])
        self.assertTrue(verdicts[f"{ARM_FSL} clustering fraction"])
        self.assertEqual(len(verdicts), 8)

    def test_run_experiment_command(self):
        output = run("run_experiment", "--data", str(self.data), "--config", self.config,
                     "--out", str(self.tmp / "table"), "--classes", "3", "--probes", "0")
        self.assertIn("avg", output)
        self.assertIn("annotation cost ratio [SS-FSL]", output)
        self.assertEqual(TrainingRun.objects.filter(test_class=3, status='COMPLETED').count(), 2)
