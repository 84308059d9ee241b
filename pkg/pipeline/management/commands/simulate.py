from pipeline.command import PipelineCommand
from pipeline.services import simulate
from simulator.store import write_dataset


class Command(PipelineCommand):
    help = "Generate a synthetic world and render one radar dataset per configured sequence"

    def run(self, context, out, **options):
        world, datasets = simulate(context)
        outputs = [out / "world.yaml"]
        for name, dataset in datasets.items():
            write_dataset(out, name, dataset, world)
            outputs.append(out / name / "trajectory.txt")
            self.stdout.write(f"{name}: {len(dataset)} scans, {dataset.trajectory.arc_length()[-1]:.1f} m")
        self.finish(context, out, outputs, sequences=sorted(datasets))
