import numpy as np

from evaluation.reports import write_csv
from learner.checkpoint import save_checkpoint
from pipeline.command import PipelineCommand
from pipeline.services import train, training_losses
from simulator.store import read_dataset


class Command(PipelineCommand):
    help = "Train the keypoint network on a simulated sequence and write a checkpoint plus its loss curve"

    def add_command_arguments(self, parser):
        parser.add_argument("--dataset", required=True, help="Directory written by `simulate`")
        parser.add_argument("--sequence", default=None, help="Sequence to train on (default: pipeline.train_sequence)")
        parser.add_argument("--steps", type=int, default=None, help="Override learner.steps")

    def run(self, context, out, **options):
        sequence = options["sequence"] or context.config["pipeline"]["train_sequence"]
        dataset = read_dataset(options["dataset"], sequence)
        run = train(context, dataset, options["steps"])

        checkpoint = out / "model.rkckpt"
        losses = out / "losses.csv"
        save_checkpoint(checkpoint, run.net, context.config_hash)
        write_csv(losses, training_losses(run), "losses", context.config_hash)

        finite = run.losses[np.isfinite(run.losses)]
        if len(finite):
            self.stdout.write(f"loss {finite[0]:.4f} -> {finite[-1]:.4f} over {len(run.losses)} steps")
        skipped = int(np.count_nonzero(~np.isfinite(run.losses)))
        if skipped:
            self.stdout.write(self.style.WARNING(f"{skipped} steps skipped on degenerate pairs"))
        calibration = run.calibration
        self.stdout.write(f"closure threshold {calibration.threshold:.6f} (recall {calibration.recall:.3f} on {sequence})")
        self.finish(
            context,
            out,
            [checkpoint, losses],
            sequence=sequence,
            closure_threshold=float(calibration.threshold),
            closure_recall=float(calibration.recall),
        )
