from dataclasses import replace

from evaluation.reports import write_csv
from place_recognition.services import PlaceRecognitionOptions
from pose_graph.services import PoseGraphOptions
from pose_graph.store import write_graph
from pipeline.command import PipelineCommand
from pipeline.services import SlamRunner, build_frontend, closure_threshold, graph_trajectory, trajectory_from_poses
from simulator.store import write_trajectory


class Command(PipelineCommand):
    help = "Run odometry, loop-closure detection and pose-graph optimisation concurrently over a sequence"

    def add_command_arguments(self, parser):
        parser.add_argument("--dataset", required=True, help="Directory written by `simulate`")
        parser.add_argument("--checkpoint", required=True, help="Checkpoint written by `train`")
        parser.add_argument("--sequence", default=None, help="Sequence to run on (default: pipeline.slam_sequence)")
        parser.add_argument(
            "--oracle",
            action="store_true",
            help="Debug: relative poses from simulator landmarks; the network still provides place embeddings",
        )

    def run(self, context, out, **options):
        config = context.config
        sequence = options["sequence"] or config["pipeline"]["slam_sequence"]
        dataset, frontend = build_frontend(
            context, options["dataset"], sequence, options["checkpoint"], options["oracle"]
        )
        threshold = closure_threshold(context, options["checkpoint"])
        place_options = replace(PlaceRecognitionOptions.from_dict(config["place_recognition"]), closure_threshold=threshold)
        runner = SlamRunner(
            frontend,
            dataset,
            place_options,
            PoseGraphOptions.from_dict(config["pose_graph"]),
            queue_size=int(config["pipeline"]["queue_size"]),
            optimise_every=int(config["pipeline"]["optimise_every"]),
        )
        result = runner.run()

        timestamps = dataset.trajectory.timestamps
        graph_path = out / "graph.txt"
        closures_path = out / "closures.csv"
        slam_path = out / "slam.txt"
        open_loop_path = out / "open_loop.txt"
        write_graph(graph_path, result.graph)
        write_csv(closures_path, result.proposals, "closures", context.config_hash)
        write_trajectory(slam_path, graph_trajectory(result.graph, timestamps))
        write_trajectory(open_loop_path, trajectory_from_poses(result.open_loop, timestamps))

        accepted = int(result.proposals["accepted"].sum()) if len(result.proposals) else 0
        self.stdout.write(f"{len(result.proposals)} closure proposals, {accepted} accepted")
        if not accepted:
            self.stdout.write(self.style.WARNING("no loop closures were accepted; the graph is open-loop"))
        self.finish(
            context,
            out,
            [graph_path, closures_path, slam_path, open_loop_path],
            sequence=sequence,
            oracle=bool(options["oracle"]),
            closure_threshold=threshold,
            optimisations=result.optimisations,
        )
