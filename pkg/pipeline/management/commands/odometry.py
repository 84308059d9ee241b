from place_recognition.store import write_embeddings
from pipeline.command import PipelineCommand
from pipeline.services import build_frontend, odometry
from simulator.store import write_trajectory


class Command(PipelineCommand):
    help = "Estimate a trajectory by chaining frame-to-frame poses over a simulated sequence"

    def add_command_arguments(self, parser):
        parser.add_argument("--dataset", required=True, help="Directory written by `simulate`")
        parser.add_argument("--checkpoint", default=None, help="Checkpoint written by `train`")
        parser.add_argument("--sequence", default=None, help="Sequence to run on (default: pipeline.slam_sequence)")
        parser.add_argument(
            "--oracle",
            action="store_true",
            help="Debug: match simulator landmarks directly instead of running the network",
        )

    def run(self, context, out, **options):
        sequence = options["sequence"] or context.config["pipeline"]["slam_sequence"]
        dataset, frontend = build_frontend(
            context, options["dataset"], sequence, options["checkpoint"], options["oracle"]
        )
        trajectory, steps, embeddings = odometry(frontend, dataset)

        outputs = [out / "odometry.txt"]
        write_trajectory(outputs[0], trajectory)
        if embeddings:
            outputs.append(out / "embeddings.rkemb")
            write_embeddings(outputs[1], embeddings)
        fallbacks = sum(1 for _, weight in steps if weight == 0.0)
        if fallbacks:
            self.stdout.write(self.style.WARNING(f"{fallbacks} steps reused the previous motion"))
        self.finish(context, out, outputs, sequence=sequence, oracle=bool(options["oracle"]))
