"""
🏋️ TWO-PHASE FOLD TRAINING
WHAT: Trains one hold-one-class-out fold.
HOW:  Every episode runs two optimizer steps in a fixed order.
      Phase 1: per-shot prototypes of (anchor query image, support annotation)
               are averaged into p_hat; theta steps on nn_loss; the registry
               then folds p_hat in.
      Phase 2: the query slices are segmented with the combined support mask;
               theta and phi step on the class-balanced cross-entropy averaged
               over the slices.
WHEN: `manage.py train`, the run_fold_experiment task, the end-to-end tests.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from autograd import ops
from autograd.tensor import Tape, backward
from episodes.sampler import EpisodeSampler
from utils.exceptions import DataError, NonFiniteError

from .checkpoints import save_checkpoint
from .config import LossConfig, TrainConfig, fewshot_setting
from .network import combine_support, episode_prototype, init_params, segment
from .objectives import PrototypeRegistry, class_balance_weight, nn_loss, total_loss, weighted_ce
from .optim import clip_grad_norm, make_optimizer

logger = logging.getLogger(__name__)


@dataclass
class TrainRecord:
    episode: int
    class_id: int
    nn_loss: float
    wce_loss: float
    beta: float
    wall_time: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    sink: Path = None

    def append(self, record):
        if self.records and record.episode <= self.records[-1].episode:
            raise DataError(f"episode {record.episode} logged after {self.records[-1].episode}")
        self.records.append(record)
        if self.sink is not None:
            try:
                with open(self.sink, "a", encoding="utf-8") as handle:
                    handle.write(json.dumps(asdict(record), sort_keys=True) + "\n")
            except OSError as exc:
                raise DataError(f"cannot append to training log {self.sink}: {exc}") from exc

    def loss_trace(self):
        """(episode, class, nn, wce, beta) tuples, i.e. everything except timing."""
        return [(r.episode, r.class_id, r.nn_loss, r.wce_loss, r.beta) for r in self.records]

    def mean_wce(self, start, stop):
        values = [r.wce_loss for r in self.records[start:stop]]
        return float(np.mean(values)) if values else float("nan")

    @staticmethod
    def read_jsonl(path):
        try:
            with open(path, encoding="utf-8") as handle:
                return TrainLog(records=[TrainRecord(**json.loads(line)) for line in handle if line.strip()])
        except (OSError, ValueError, TypeError) as exc:
            raise DataError(f"unreadable training log {path}: {exc}") from exc


class TrainResult(NamedTuple):
    params: object
    registry: PrototypeRegistry
    log: TrainLog


def log_path_for(checkpoint_path):
    checkpoint_path = Path(checkpoint_path)
    return checkpoint_path.with_name(checkpoint_path.name + ".log.jsonl")


def _check_finite(value, name, episode):
    if not np.isfinite(value):
        raise NonFiniteError(f"{name} is not finite at episode {episode}", tensor_name=name, episode=episode)


def _check_params(tensors, episode):
    for name, tensor in tensors.items():
        if not np.all(np.isfinite(tensor.data)):
            raise NonFiniteError(f"parameter {name} diverged at episode {episode}", tensor_name=name, episode=episode)


def phase_one(params, registry, episode, optimizer, loss_cfg, clip_norm):
    """
    Nearest-neighbour step on theta, then the registry update.

    A class seen for the first time seeds the registry with this episode's
    prototype before the loss (the loss needs the class present) and skips
    the post-step update. Returns the loss value.
    """
    class_id = episode.class_id
    query_image = episode.anchor.image
    with Tape():
        p_hat = episode_prototype(params, query_image, episode.support)
        first_seen = class_id not in registry
        if first_seen:
            registry.update(class_id, p_hat)
        nn = nn_loss(p_hat, registry, class_id, loss_cfg)
        value = nn.item()
        _check_finite(value, "nn_loss", episode.index)
        backward(nn)
    clip_grad_norm(params.theta, clip_norm)
    optimizer.step(params.theta)
    _check_params(params.theta, episode.index)
    if not first_seen:
        registry.update(class_id, p_hat.detach())
    return value


def phase_two(params, episode, optimizer, loss_cfg, clip_norm):
    """
    Cross-entropy step on theta + phi, averaged over the query slices.
    Returns (mean loss, mean beta).
    """
    mask = combine_support(episode.support)
    scale = 1.0 / len(episode.query)
    values, betas = [], []
    for query in episode.query:
        beta = class_balance_weight(query.label, loss_cfg)
        with Tape():
            pred = segment(params, query.image, mask)
            wce = weighted_ce(pred, query.label, loss_cfg, beta)
            values.append(wce.item())
            _check_finite(values[-1], "weighted_ce", episode.index)
            backward(ops.scale(wce, scale))
        betas.append(beta)
    named = params.named()
    clip_grad_norm(named, clip_norm)
    optimizer.step(named)
    _check_params(named, episode.index)
    return float(np.mean(values)), float(np.mean(betas))


def train_fold(fold, data, model_cfg, episode_cfg, train_cfg=None, loss_cfg=None, *,
               checkpoint_path=None, meta=None, params=None):
    """
    Returns TrainResult(params, registry, log). With `checkpoint_path`, the
    TrainLog is appended to `<checkpoint>.log.jsonl` and checkpoints are
    written every `checkpoint_every` episodes and at the end.
    """
    train_cfg = train_cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    episode_cfg = episode_cfg.for_arm(train_cfg.weak_support)
    params = params if params is not None else init_params(model_cfg, train_cfg.seed)
    registry = PrototypeRegistry(loss_cfg.registry_momentum)
    optimizer = make_optimizer(train_cfg)

    sink = None
    if checkpoint_path is not None:
        sink = log_path_for(checkpoint_path)
        try:
            sink.parent.mkdir(parents=True, exist_ok=True)
            sink.write_text("")
        except OSError as exc:
            raise DataError(f"cannot create training log {sink}: {exc}") from exc
    log = TrainLog(sink=sink)

    log_every = max(1, int(fewshot_setting("LOG_EVERY", 100)))
    logger.info(
        f"🏋️ Training fold {fold.test_class}: {train_cfg.episodes} episodes, "
        f"train classes {list(fold.train_classes)}, shots {episode_cfg.shots_full} full + {episode_cfg.shots_weak} weak"
    )
    sampler = EpisodeSampler(fold, data, episode_cfg) if train_cfg.episodes else None

    for index in range(train_cfg.episodes):
        started = time.perf_counter()
        episode = sampler.sample(index)
        if episode.class_id == fold.test_class:
            raise DataError(f"episode {index} drew the held-out class {fold.test_class}")
        try:
            nn_value = phase_one(params, registry, episode, optimizer, loss_cfg, train_cfg.clip_norm)
            wce_value, beta = phase_two(params, episode, optimizer, loss_cfg, train_cfg.clip_norm)
        except NonFiniteError as exc:
            exc.episode = index
            logger.error(
                f"❌ Non-finite value at episode {index} (class {episode.class_id}, tensor {exc.tensor_name}): {exc}"
            )
            raise

        log.append(TrainRecord(
            episode=index,
            class_id=episode.class_id,
            nn_loss=nn_value,
            wce_loss=wce_value,
            beta=beta,
            wall_time=time.perf_counter() - started,
        ))
        if (index + 1) % log_every == 0:
            recent = log.records[-log_every:]
            logger.info(
                f"episode {index + 1}/{train_cfg.episodes} | "
                f"nn {np.mean([r.nn_loss for r in recent]):.4f} | "
                f"wce {np.mean([r.wce_loss for r in recent]):.4f} | "
                f"total {total_loss(recent[-1].nn_loss, recent[-1].wce_loss):.4f}"
            )
        if checkpoint_path is not None and train_cfg.checkpoint_every and (index + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(params, registry, checkpoint_path, meta)

    if checkpoint_path is not None:
        save_checkpoint(params, registry, checkpoint_path, meta)
    logger.info(f"✅ Fold {fold.test_class} trained ({len(log.records)} episodes, {len(registry)} prototypes)")
    return TrainResult(params=params, registry=registry, log=log)
