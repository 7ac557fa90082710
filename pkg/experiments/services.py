"""
🏗️ EXPERIMENT SERVICE LAYER
WHAT: Glues data, configs, training, checkpoints and evaluation together for
      the management commands and the fold experiment task.
WHEN: train / eval / predict / run_experiment, run_fold_experiment
"""
import logging
from pathlib import Path

import numpy as np
from django.db import transaction
from django.utils import timezone

from episodes.folds import make_folds
from episodes.sampler import build_support
from evaluation.metrics import annotation_cost_ratio
from evaluation.services import (
    ARM_FSL, ARM_SS_FSL, arm_label, evaluate_fold, predict_volume, probe_prototype_clustering,
)
from segmentation.checkpoints import load_checkpoint
from segmentation.config import fewshot_setting
from segmentation.network import ModelParams
from segmentation.trainer import log_path_for, train_fold
from utils.exceptions import ConfigurationError, DataError
from volumes.records import AnnotatedVolume, LabelMask, Volume
from volumes.services import DatasetService

from .forms import config_digest, parse_run_config, parse_run_config_text
from .models import FoldEvaluation, TrainingRun

logger = logging.getLogger(__name__)

SUMMARY_WINDOW = 100

# Frozen after the default-cohort baseline (see DESIGN.md).
MIN_MEAN_DICE = 0.50
MAX_ARM_GAP = 0.10
MIN_CLUSTERING_FRACTION = 0.90


class ExperimentService:
    """
    🎯 One place for every pipeline operation that spans several apps.
    """

    # ==========================================================================
    # FOLDS + DATA CHECKS
    # ==========================================================================

    @staticmethod
    def fold_for(records, test_class):
        """FoldSpec for `test_class` over a loaded cohort (classes 1..K, patients 0..P-1)."""
        class_ids = DatasetService.class_ids(records)
        if class_ids != list(range(1, len(class_ids) + 1)):
            raise DataError(f"class ids must run 1..K, found {class_ids}")
        patients = sorted({record.patient_id for record in records})
        if patients != list(range(len(patients))):
            raise DataError(f"patient ids must run 0..P-1, found {patients}")
        if test_class not in class_ids:
            raise ConfigurationError(f"test class {test_class} is not in the data (classes {class_ids})")
        for fold in make_folds(len(class_ids), len(patients)):
            if fold.test_class == test_class:
                return fold

    @staticmethod
    def check_slice_extents(records, model_cfg):
        extents = {tuple(record.dims[1:]) for record in records}
        if len(extents) != 1:
            raise DataError(f"volumes disagree on slice extents: {sorted(extents)}")
        (extent,) = extents
        if model_cfg.input_size is not None and tuple(model_cfg.input_size) != extent:
            raise ConfigurationError(f"model input_size {model_cfg.input_size} does not match data slices {extent}")

    @staticmethod
    def full_shot_annotations(records, test_class):
        """Annotated slices a full-data model would consume for one class: every foreground slice."""
        return int(sum(
            int(record.mask.foreground.any(axis=(1, 2)).sum())
            for record in records if record.class_id == test_class
        ))

    @staticmethod
    def cost_ratio(records, run_config, test_class):
        cfg = run_config.episodes.for_arm(run_config.train.weak_support)
        return annotation_cost_ratio(
            ExperimentService.full_shot_annotations(records, test_class),
            cfg.shots_full,
            cfg.shots_weak,
            fewshot_setting("WEAK_FACTOR", 15.0),
        )

    # ==========================================================================
    # TRAIN / LOAD
    # ==========================================================================

    @staticmethod
    def checkpoint_meta(run_config, test_class):
        return {
            "config": run_config.canonical_json(),
            "digest": run_config.digest,
            "test_class": int(test_class),
        }

    @staticmethod
    def train(records, run_config, test_class, checkpoint_path=None):
        """Train one fold; with a path, the checkpoint embeds config, digest and test class."""
        fold = ExperimentService.fold_for(records, test_class)
        ExperimentService.check_slice_extents(records, run_config.model)
        return train_fold(
            fold,
            records,
            run_config.model,
            run_config.episodes,
            run_config.train,
            run_config.loss,
            checkpoint_path=checkpoint_path,
            meta=ExperimentService.checkpoint_meta(run_config, test_class),
        )

    @staticmethod
    def load_trained(checkpoint_path, test_class=None):
        """
        🔐 GUARDED LOAD: returns (checkpoint, run_config) and refuses checkpoints
        whose embedded config does not hash to the embedded digest, or that were
        trained for another held-out class.
        """
        checkpoint = load_checkpoint(checkpoint_path)
        text = checkpoint.meta_text("config")
        digest = checkpoint.meta_text("digest")
        trained_for = checkpoint.meta_text("test_class")
        if text is None or digest is None or trained_for is None:
            raise ConfigurationError(f"checkpoint {checkpoint_path} carries no run config metadata")
        if config_digest(text) != digest:
            raise ConfigurationError(
                f"checkpoint {checkpoint_path} config digest mismatch: embedded {digest[:12]}, "
                f"computed {config_digest(text)[:12]}"
            )
        if test_class is not None and int(trained_for) != int(test_class):
            raise ConfigurationError(
                f"checkpoint {checkpoint_path} was trained with class {trained_for} held out, not {test_class}"
            )
        run_config = parse_run_config_text(text)

        stored, wanted = checkpoint.params.config, run_config.model
        if (stored.levels, stored.base_channels, stored.proto_dim) != (
            wanted.levels, wanted.base_channels, wanted.proto_dim
        ):
            raise ConfigurationError(f"checkpoint tensors do not fit the embedded model config {wanted.as_dict()}")
        checkpoint.params = ModelParams.from_named(wanted, checkpoint.params.named())
        checkpoint.registry.momentum = run_config.loss.registry_momentum
        return checkpoint, run_config

    # ==========================================================================
    # EVALUATE / PREDICT
    # ==========================================================================

    @staticmethod
    def evaluate(records, checkpoint, run_config, test_class, report_path=None, preview_dir=None):
        fold = ExperimentService.fold_for(records, test_class)
        ExperimentService.check_slice_extents(records, run_config.model)
        report = evaluate_fold(
            fold,
            records,
            checkpoint.params,
            checkpoint.registry,
            run_config.episodes,
            arm=arm_label(run_config.train.weak_support),
            digest=run_config.digest,
            preview_dir=preview_dir,
        )
        if report_path is not None:
            report_path = Path(report_path)
            try:
                report_path.parent.mkdir(parents=True, exist_ok=True)
                report_path.write_text(report.to_json())
            except OSError as exc:
                raise DataError(f"cannot write report {report_path}: {exc}") from exc
        return report

    @staticmethod
    def predict(checkpoint, run_config, query, support_image, support_mask):
        """
        Single-query inference. The support pair becomes A full + B box shots
        (per the checkpoint's arm) of the support mask's class.
        """
        if not isinstance(query, Volume) or not isinstance(support_image, Volume):
            raise DataError("query and support image must be FSV1 image volumes")
        if not isinstance(support_mask, LabelMask):
            raise DataError("support mask must be an FSV1 label mask")
        class_id = int(support_mask.labels.max())
        if class_id == 0:
            raise DataError("support mask holds no foreground")
        annotated = AnnotatedVolume(0, class_id, support_image, support_mask)
        support = build_support(annotated, run_config.episodes.for_arm(run_config.train.weak_support))
        return predict_volume(checkpoint.params, checkpoint.registry, support, query, label=class_id)

    # ==========================================================================
    # FOLD EXPERIMENT
    # ==========================================================================

    @staticmethod
    def run_fold(data_dir, config, test_class, weak_support, out_dir, probes=0):
        """
        Train + evaluate one (fold, arm) and record it in the ledger.
        Returns the FoldEvaluation; failures are stored on the TrainingRun and re-raised.
        """
        run_config = parse_run_config(config).with_arm(weak_support)
        arm = arm_label(weak_support)
        fold_dir = Path(out_dir) / f"class{test_class:02d}_{arm.lower()}"
        checkpoint_path = fold_dir / "model.fspm"
        run = TrainingRun.objects.create(
            data_dir=str(data_dir),
            config=run_config.as_dict(),
            digest=run_config.digest,
            test_class=test_class,
            arm=arm,
            checkpoint_path=str(checkpoint_path),
            episodes=run_config.train.episodes,
        )
        logger.info(f"🚀 Fold experiment {run.pk}: class {test_class} [{arm}] digest {run.digest[:12]}")

        try:
            records = DatasetService.load(data_dir)
            result = ExperimentService.train(records, run_config, test_class, checkpoint_path)
            checkpoint, _ = ExperimentService.load_trained(checkpoint_path, test_class)
            report = ExperimentService.evaluate(
                records, checkpoint, run_config, test_class, report_path=fold_dir / "report.json"
            )
            clustering = None
            if probes and len(result.registry) >= 2:
                probe = probe_prototype_clustering(
                    ExperimentService.fold_for(records, test_class), records,
                    result.params, result.registry, run_config.episodes, probes,
                )
                clustering = probe.fraction_positive
            cost = ExperimentService.cost_ratio(records, run_config, test_class)
        except Exception as exc:
            # Any escape leaves the ledger row FAILED, never RUNNING.
            run.status = 'FAILED'
            run.error_message = f"{type(exc).__name__}: {exc}"
            run.finished_at = timezone.now()
            run.save(update_fields=['status', 'error_message', 'finished_at'])
            logger.error(f"❌ Fold experiment {run.pk} failed: {run.error_message}")
            raise

        recent = result.log.records[-SUMMARY_WINDOW:]
        with transaction.atomic():
            run.status = 'COMPLETED'
            run.finished_at = timezone.now()
            run.final_nn_loss = float(np.mean([r.nn_loss for r in recent])) if recent else None
            run.final_wce_loss = float(np.mean([r.wce_loss for r in recent])) if recent else None
            run.save()
            evaluation = FoldEvaluation.objects.create(
                run=run,
                mean_dice=report.mean,
                median_dice=report.median,
                per_patient=report.to_dict()["dice"],
                report_path=str(fold_dir / "report.json"),
                cost_ratio=cost,
                clustering_fraction=clustering,
            )
        logger.info(f"✅ Fold experiment {run.pk} done: mean dice {report.mean:.4f} (log {log_path_for(checkpoint_path)})")
        return evaluation

    @staticmethod
    def summarize(evaluations):
        """
        Per-class mean dice for both arms, per-arm averages, the SS-FSL minus
        FSL difference, the per-arm annotation-cost ratio and the worst
        clustering fraction of each arm.
        """
        table = {}
        costs = {}
        clustering = {}
        for evaluation in evaluations:
            table.setdefault(evaluation.run.test_class, {})[evaluation.run.arm] = evaluation.mean_dice
            if evaluation.cost_ratio is not None:
                costs.setdefault(evaluation.run.arm, []).append(evaluation.cost_ratio)
            if evaluation.clustering_fraction is not None:
                clustering.setdefault(evaluation.run.arm, []).append(evaluation.clustering_fraction)

        rows = []
        for class_id in sorted(table):
            fsl = table[class_id].get(ARM_FSL)
            ss_fsl = table[class_id].get(ARM_SS_FSL)
            difference = ss_fsl - fsl if fsl is not None and ss_fsl is not None else None
            rows.append({"class_id": class_id, ARM_FSL: fsl, ARM_SS_FSL: ss_fsl, "difference": difference})

        average = {}
        for arm in (ARM_FSL, ARM_SS_FSL):
            values = [row[arm] for row in rows if row[arm] is not None]
            average[arm] = float(np.mean(values)) if values else None
        differences = [row["difference"] for row in rows if row["difference"] is not None]
        average["difference"] = float(np.mean(differences)) if differences else None
        cost = {arm: float(np.mean(values)) for arm, values in costs.items()}
        clustering = {arm: float(np.min(values)) for arm, values in clustering.items()}
        return {"rows": rows, "average": average, "cost": cost, "clustering": clustering}

    @staticmethod
    def acceptance_checks(summary):
        """
        (name, value, bound, passed) for every frozen bound the summary can be
        judged on: per-fold mean dice, the per-fold arm gap and the worst
        clustering fraction of each arm.
        """
        checks = []
        for row in summary["rows"]:
            for arm in (ARM_FSL, ARM_SS_FSL):
                if row[arm] is not None:
                    checks.append((f"class {row['class_id']} {arm} mean dice", row[arm], MIN_MEAN_DICE,
                                   row[arm] >= MIN_MEAN_DICE))
            if row["difference"] is not None:
                gap = abs(row["difference"])
                checks.append((f"class {row['class_id']} |SS-FSL - FSL|", gap, MAX_ARM_GAP, gap <= MAX_ARM_GAP))
        for arm, fraction in sorted(summary.get("clustering", {}).items()):
            checks.append((f"{arm} clustering fraction", fraction, MIN_CLUSTERING_FRACTION,
                           fraction >= MIN_CLUSTERING_FRACTION))
        return checks
