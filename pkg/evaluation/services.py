"""
🩺 EVALUATION SERVICE LAYER
WHAT: Slice-wise 3D prediction, fold-level dice reports and the prototype
      clustering probe.
HOW:  Each query volume is segmented one axial slice at a time with the
      combined support mask, binarised and restacked; dice is then taken over
      the whole volume.
WHEN: `manage.py eval` / `predict`, the run_fold_experiment task.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from autograd import ops
from autograd.tensor import Tensor, no_grad
from episodes.sampler import EpisodeSampler, eval_tasks
from segmentation.config import fewshot_setting
from segmentation.network import combine_support, episode_prototype, segment
from utils.exceptions import ConfigurationError, DataError, ShapeError
from volumes.records import AnnotatedVolume, LabelMask, VolumeKind

from .metrics import dice, summarize
from .previews import save_volume_previews

logger = logging.getLogger(__name__)

ARM_FSL = "FSL"
ARM_SS_FSL = "SS-FSL"
ARMS = (ARM_FSL, ARM_SS_FSL)
PROBE_START = 1_000_000


def arm_label(weak_support):
    return ARM_SS_FSL if weak_support else ARM_FSL


# ==============================================================================
# DICE REPORT
# ==============================================================================

class ReportFormatError(DataError):
    pass


@dataclass
class DiceReport:
    """Per-patient volumetric dice for one fold and one arm."""

    class_id: int
    arm: str = ARM_FSL
    digest: str = ""
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigurationError(f"arm must be one of {ARMS}, got {self.arm!r}")
        entries = []
        for patient_id, score in self.entries:
            entries.append(self._check_entry(patient_id, score))
        self.entries = entries

    @staticmethod
    def _check_entry(patient_id, score):
        score = float(score)
        if not 0.0 <= score <= 1.0:
            raise DataError(f"dice for patient {patient_id} outside [0, 1]: {score}")
        return int(patient_id), score

    def add(self, patient_id, score):
        self.entries.append(self._check_entry(patient_id, score))

    def remove(self, patient_id):
        kept = [entry for entry in self.entries if entry[0] != patient_id]
        if len(kept) == len(self.entries):
            raise KeyError(patient_id)
        self.entries = kept

    @property
    def scores(self):
        return [score for _, score in self.entries]

    @property
    def mean(self):
        return summarize(self.scores)[0] if self.entries else float("nan")

    @property
    def median(self):
        return summarize(self.scores)[1] if self.entries else float("nan")

    def to_dict(self):
        return {
            "class_id": self.class_id,
            "arm": self.arm,
            "digest": self.digest,
            "dice": [{"patient_id": p, "dice": d} for p, d in self.entries],
            "mean": self.mean,
            "median": self.median,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        expected = {"class_id", "arm", "digest", "dice", "mean", "median"}
        if not isinstance(data, dict) or set(data) != expected:
            found = sorted(data) if isinstance(data, dict) else type(data).__name__
            raise ReportFormatError(f"report keys must be {sorted(expected)}, got {found}")
        try:
            report = cls(
                class_id=int(data["class_id"]),
                arm=data["arm"],
                digest=str(data["digest"]),
                entries=[(e["patient_id"], e["dice"]) for e in data["dice"]],
            )
        except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
            raise ReportFormatError(f"malformed dice report: {exc}") from exc
        if report.entries and not (
            np.isclose(report.mean, data["mean"]) and np.isclose(report.median, data["median"])
        ):
            raise ReportFormatError("stored mean/median disagree with the per-patient scores")
        return report

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ReportFormatError(f"report is not JSON: {exc}") from exc
        return cls.from_dict(data)


# ==============================================================================
# PREDICTION
# ==============================================================================

def predict_volume(params, registry, support, query_volume, threshold=None, label=1):
    """
    Segment every axial slice of `query_volume` (Volume or AnnotatedVolume)
    with the combined support mask and restack the binarised slices into a
    full LabelMask holding `label` on predicted voxels.

    `registry` is not consulted: at inference the class only enters through
    the support annotations.
    """
    threshold = fewshot_setting("THRESHOLD", 0.5) if threshold is None else float(threshold)
    volume = query_volume.volume if isinstance(query_volume, AnnotatedVolume) else query_volume
    if not support:
        raise ConfigurationError("predict_volume needs a non-empty support set")
    mask = combine_support(support)
    depth, height, width = volume.dims
    if mask.shape != (1, height, width):
        raise ShapeError(f"support mask {mask.shape} does not match query slices {(1, height, width)}")
    input_size = params.config.input_size
    if input_size is not None and tuple(input_size) != (height, width):
        raise ShapeError(f"model expects {input_size} slices, query has {(height, width)}")

    labels = np.zeros(volume.dims, dtype=np.uint8)
    with no_grad():
        for z in range(depth):
            probs = segment(params, Tensor(volume.voxels[z][None]), mask).numpy()[0]
            labels[z][probs >= threshold] = label
    logger.debug(f"predicted {int((labels > 0).sum())} foreground voxels over {depth} slices")
    return LabelMask(labels, VolumeKind.FULL)


def evaluate_fold(fold, data, params, registry, episode_cfg, *, predictor=None, arm=ARM_FSL,
                  digest="", threshold=None, preview_dir=None):
    """
    One volumetric dice per query patient of the held-out class.

    The support set follows the arm: 1 full + 3 boxes for SS-FSL, all full
    otherwise. `predictor(support, annotated)` replaces the network when given.
    """
    tasks = eval_tasks(fold, data, episode_cfg.for_arm(arm == ARM_SS_FSL))
    if predictor is None:
        def predictor(support, annotated):
            return predict_volume(params, registry, support, annotated, threshold)

    report = DiceReport(class_id=fold.test_class, arm=arm, digest=digest)
    for task in tasks:
        annotated = task.query_volume
        prediction = predictor(task.support, annotated)
        score = dice(prediction, annotated.mask)
        report.add(annotated.patient_id, score)
        logger.debug(f"class {fold.test_class} patient {annotated.patient_id}: dice {score:.4f}")
        if preview_dir is not None:
            save_volume_previews(preview_dir, annotated.patient_id, prediction, annotated.mask)

    if report.entries:
        logger.info(
            f"📊 Fold {fold.test_class} [{arm}]: {len(report.entries)} patients, "
            f"mean dice {report.mean:.4f}, median {report.median:.4f}"
        )
    else:
        logger.warning(f"⚠️ Fold {fold.test_class} [{arm}] has no query patients to evaluate")
    return report


# ==============================================================================
# PROTOTYPE CLUSTERING PROBE
# ==============================================================================

@dataclass
class ClusteringProbe:
    """Own-entry minus mean other-entry cosine similarity, one margin per probe episode."""

    margins: list = field(default_factory=list)

    @property
    def fraction_positive(self):
        if not self.margins:
            return float("nan")
        return float(np.mean([margin > 0 for margin in self.margins]))

    @property
    def mean_margin(self):
        return float(np.mean(self.margins)) if self.margins else float("nan")


def probe_prototype_clustering(fold, data, params, registry, episode_cfg, probes=50):
    """
    Sample fresh train-class episodes and check that each episode prototype
    sits closer to its own registry entry than to the others on average.
    """
    if len(registry) < 2:
        raise ConfigurationError(f"clustering probe needs >= 2 registry entries, got {len(registry)}")
    sampler = EpisodeSampler(fold, data, episode_cfg)
    result = ClusteringProbe()
    with no_grad():
        for index in range(PROBE_START, PROBE_START + probes):
            episode = sampler.sample(index)
            if episode.class_id not in registry:
                logger.warning(f"⚠️ Probe skipped class {episode.class_id}: not in the registry")
                continue
            p_hat = episode_prototype(params, episode.anchor.image, episode.support)
            similarity = {
                k: ops.cosine_similarity(p_hat, Tensor(registry.get(k))).item() for k in registry.classes
            }
            own = similarity.pop(episode.class_id)
            result.margins.append(own - float(np.mean(list(similarity.values()))))
    logger.info(
        f"🧭 Clustering probe on fold {fold.test_class}: {result.fraction_positive:.0%} of "
        f"{len(result.margins)} probes have a positive margin (mean {result.mean_margin:.4f})"
    )
    return result
