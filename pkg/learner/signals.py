from django.dispatch import Signal

# Sent after every training or fine-tuning step.
# kwargs: step, loss, skipped, weight_sum, phase ("odometry" or "triplet")
train_step_finished = Signal()
