from matcher.services import benchmark_match_points
from pipeline.command import PipelineCommand

BUDGET_SECONDS = 0.035


class Command(PipelineCommand):
    help = "Time match_points on random inputs (400 keypoints against a 256x256x16 map by default)"
    out_required = False

    def add_command_arguments(self, parser):
        parser.add_argument("--keypoints", type=int, default=400)
        parser.add_argument("--size", type=int, default=256)
        parser.add_argument("--channels", type=int, default=16)
        parser.add_argument("--repeats", type=int, default=5)

    def run(self, context, out, **options):
        matcher = context.config["matcher"]
        timings = benchmark_match_points(
            keypoints=options["keypoints"],
            size=options["size"],
            channels=options["channels"],
            temperature=float(matcher["temperature"]),
            block_size=int(matcher["block_size"]),
            precision=str(matcher["precision"]),
            repeats=options["repeats"],
            seed=context.seed,
        )
        message = (
            f"{matcher['precision']}: best {timings['best'] * 1e3:.1f} ms, "
            f"median {timings['median'] * 1e3:.1f} ms"
        )
        if timings["best"] <= BUDGET_SECONDS:
            self.stdout.write(self.style.SUCCESS(message))
        else:
            self.stdout.write(self.style.WARNING(f"{message} (over the {BUDGET_SECONDS * 1e3:.0f} ms budget)"))
