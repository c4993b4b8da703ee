import logging

from celery import shared_task

from .metrics import json_safe
from .models import ExperimentRun
from .runner import ExperimentConfig, run_offline_design, run_online_experiment

logger = logging.getLogger(__name__)


@shared_task(bind=True, max_retries=0)
def run_experiment_task(self, run_id):
    """
    Execute the ExperimentRun ``run_id`` and record its outcome.

    Returns:
        dict: the run summary (non-finite values as None).
    """
    run = ExperimentRun.objects.get(pk=run_id)
    run.mark_running()
    try:
        config = ExperimentConfig.from_options(**run.config)
        if run.kind == ExperimentRun.Kind.DESIGN:
            summary = run_offline_design(config)
        else:
            summary = run_online_experiment(config)
    except Exception as e:
        logger.error("Experiment run %s failed: %s", run_id, e, exc_info=True)
        run.mark_failed(e)
        raise

    summary = json_safe(summary)
    run.mark_completed(summary)
    logger.info("Experiment run %s completed", run_id)
    return summary
