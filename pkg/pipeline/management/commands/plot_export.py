from pathlib import Path

import pandas as pd
import yaml

from core.exceptions import DataError
from evaluation.reports import FLOAT_FORMAT, read_csv
from pipeline.command import PipelineCommand
from simulator.store import TRAJECTORY_FIELDS, read_trajectory


def _label(path):
    return f"{path.parent.name}-{path.stem}".strip("-").replace(" ", "_")


class Command(PipelineCommand):
    help = "Turn trajectory files and report CSVs into plain delimited files for external plotting"

    def add_command_arguments(self, parser):
        parser.add_argument("inputs", nargs="+", help="Trajectory files and CSV reports (losses, drift, closures, ...)")

    def run(self, context, out, **options):
        index = []
        outputs = []
        for name in options["inputs"]:
            source = Path(name)
            if not source.is_file():
                raise DataError(f"{source}: no such file")
            with source.open() as fh:
                first = fh.readline().strip()
            if first in TRAJECTORY_FIELDS:
                trajectory = read_trajectory(source)
                frame = pd.DataFrame(trajectory.poses, columns=["x", "y", "theta"])
                frame.insert(0, "t", trajectory.timestamps)
                kind, config = "trajectory", ""
                target = out / f"trajectory_{_label(source)}.csv"
            else:
                frame, header = read_csv(source)
                kind, config = header["title"], header["config"]
                target = out / f"{kind}_{_label(source)}.csv"
            frame.to_csv(target, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
            index.append({"source": str(source), "output": target.name, "kind": kind, "config": config})
            outputs.append(target)
            self.stdout.write(f"{source} -> {target.name}")

        (out / "plots.yaml").write_text(yaml.safe_dump({"plots": index}, sort_keys=False))
        outputs.append(out / "plots.yaml")
        self.finish(context, out, outputs)
