"""
❓ WHY THIS FILE EXISTS:
A fold experiment (train + evaluate one held-out class in one arm) is the
unit of work that can be fanned out to Celery workers. With
CELERY_TASK_ALWAYS_EAGER (the default) it runs in the calling process.
"""
import logging

from celery import shared_task

logger = logging.getLogger(__name__)


@shared_task
def run_fold_experiment(data_dir, config, test_class, weak_support, out_dir, probes=0):
    """
    🧪 One (fold, arm) experiment.

    Args are JSON-serialisable: `config` is the decoded run-config document.
    Returns the FoldEvaluation primary key.
    """
    from .services import ExperimentService

    evaluation = ExperimentService.run_fold(data_dir, config, test_class, weak_support, out_dir, probes)
    logger.info(f"Fold task finished: class {test_class}, weak_support={weak_support}, evaluation {evaluation.pk}")
    return evaluation.pk
