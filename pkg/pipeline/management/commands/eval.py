import pandas as pd

from evaluation.reports import drift_frame, precision_frame, read_csv, recall_frame, write_csv, write_table
from evaluation.services import (
    KITTI_LENGTHS,
    EvaluationOptions,
    absolute_trajectory_error,
    closure_precision,
    kitti_drift,
    precision_recall_curve,
)
from pipeline.command import PipelineCommand
from pipeline.services import closure_proposals
from place_recognition.services import EmbeddingIndex, recall_curve
from place_recognition.store import read_embeddings
from simulator.store import read_trajectory


class Command(PipelineCommand):
    help = "Score an estimated trajectory (drift, ATE) and optionally loop closures and place recall"

    def add_command_arguments(self, parser):
        parser.add_argument("--estimate", required=True, help="Estimated trajectory file")
        parser.add_argument("--truth", required=True, help="Ground-truth trajectory file")
        parser.add_argument("--closures", default=None, help="closures.csv written by `slam`")
        parser.add_argument("--threshold", type=float, default=None,
                            help="Similarity threshold for the closure precision report "
                                 "(default: place_recognition.closure_threshold)")
        parser.add_argument("--database", default=None, help="Embedding store searched for place recall")
        parser.add_argument("--queries", default=None, help="Embedding store of the recall queries")
        parser.add_argument("--full-lengths", action="store_true",
                            help="Use the 100..800 m subsequence lengths of the KITTI benchmark")

    def run(self, context, out, **options):
        evaluation = EvaluationOptions.from_dict(context.config["evaluation"])
        lengths = KITTI_LENGTHS if options["full_lengths"] else evaluation.lengths
        estimate = read_trajectory(options["estimate"])
        truth = read_trajectory(options["truth"])

        drift = kitti_drift(estimate.poses, truth.poses, lengths, evaluation.step_size)
        ate = absolute_trajectory_error(estimate.positions, truth.positions)
        table = drift_frame(drift)
        write_table(out / "drift.txt", table, "drift", context.config_hash)
        write_csv(out / "drift.csv", table, "drift", context.config_hash)
        outputs = [out / "drift.txt", out / "drift.csv"]
        summary = [
            {"metric": "translation_pct", "value": drift.translation_pct},
            {"metric": "rotation_deg_per_m", "value": drift.rotation_deg_per_m},
            {"metric": "ate_m", "value": ate},
        ]
        self.stdout.write(
            f"drift {drift.translation_pct:.4f} %, {drift.rotation_deg_per_m:.6f} deg/m, ATE {ate:.4f} m"
        )

        if options["closures"]:
            frame, _ = read_csv(options["closures"])
            proposals = closure_proposals(frame)
            threshold = options["threshold"]
            if threshold is None:
                threshold = float(context.config["place_recognition"]["closure_threshold"])
            report = closure_precision(proposals, truth.positions, evaluation.distance, threshold)
            curve = precision_recall_curve(proposals, truth.positions, evaluation.distance)
            write_table(out / "precision.txt", precision_frame([report]), "precision", context.config_hash)
            write_csv(out / "precision_curve.csv", curve, "precision_curve", context.config_hash)
            outputs += [out / "precision.txt", out / "precision_curve.csv"]
            summary += [
                {"metric": "closure_precision", "value": report.precision},
                {"metric": "closure_recall", "value": report.recall},
            ]
            self.stdout.write(
                f"closures at {threshold:g}: precision {report.precision:.3f}, recall {report.recall:.3f}"
            )

        if options["database"] and options["queries"]:
            index = EmbeddingIndex(context.config["place_recognition"]["backend"])
            index.extend(read_embeddings(options["database"]))
            recall = recall_curve(read_embeddings(options["queries"]), index, evaluation.recall_max_n, evaluation.distance)
            write_csv(out / "recall.csv", recall_frame(recall), "recall", context.config_hash)
            outputs.append(out / "recall.csv")
            summary.append({"metric": "recall_at_1", "value": float(recall[0])})
            self.stdout.write(f"recall@1 {recall[0]:.3f}")
        elif options["database"] or options["queries"]:
            self.stdout.write(self.style.WARNING("place recall needs both --database and --queries; skipped"))

        write_csv(out / "summary.csv", pd.DataFrame(summary), "summary", context.config_hash)
        outputs.append(out / "summary.csv")
        self.finish(context, out, outputs, lengths=[float(v) for v in lengths])
