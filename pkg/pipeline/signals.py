import logging

from django.dispatch import receiver

from learner.signals import train_step_finished

logger = logging.getLogger(__name__)


@receiver(train_step_finished)
def log_train_step(sender, step, loss, skipped, weight_sum, phase="odometry", **kwargs):
    logger.info(
        "train step",
        extra={"step": step, "loss": loss, "skipped": skipped, "weight_sum": weight_sum, "phase": phase},
    )
