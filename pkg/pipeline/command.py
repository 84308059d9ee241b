"""Base class for the rks management commands."""

import logging
import sys
from functools import partial
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from core.exceptions import RksError

from .conf import RunContext, describe_config, write_manifest

logger = logging.getLogger(__name__)


def _usage_error(parser, message):
    """Bad arguments exit with code 1; code 2 is for data errors."""
    if parser.called_from_command_line:
        parser.print_usage(sys.stderr)
        parser.exit(1, f"{parser.prog}: error: {message}\n")
    raise CommandError(f"Error: {message}", returncode=1)


class PipelineCommand(BaseCommand):
    """Adds --config/--seed/--out and turns RksError into the documented exit codes.

    Subclasses implement add_command_arguments() and run(context, out, **options).
    """

    requires_system_checks = []
    out_required = True

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = partial(_usage_error, parser)
        return parser

    def add_arguments(self, parser):
        parser.add_argument("--config", default=None, help="YAML file overriding the pipeline defaults")
        parser.add_argument("--seed", type=int, default=None, help="Root seed (unsigned 64-bit); overrides pipeline.seed")
        parser.add_argument("--out", default=None, help="Output directory")
        parser.add_argument("--show-config", action="store_true", help="Print the merged config with provenance and exit")
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            context = RunContext.build(options["config"], options["seed"])
            if options["show_config"]:
                self.stdout.write(describe_config(context.config).to_string(index=False))
                return
            if options["out"] is None and self.out_required:
                raise CommandError("--out is required", returncode=1)
            out = None
            if options["out"] is not None:
                out = Path(options["out"])
                out.mkdir(parents=True, exist_ok=True)
            options = {k: v for k, v in options.items() if k != "out"}
            self.run(context, out, **options)
        except RksError as exc:
            logger.error(str(exc), extra={"exit_code": exc.exit_code, "error": type(exc).__name__})
            raise CommandError(str(exc), returncode=exc.exit_code) from exc

    def run(self, context, out, **options):
        raise NotImplementedError

    def finish(self, context, out, outputs, **extra):
        """Write the run manifest next to the outputs and report them."""
        manifest = context.manifest(self.command_name, [Path(o).relative_to(out) for o in outputs], **extra)
        write_manifest(out / f"{self.command_name}.manifest.yaml", manifest)
        for path in outputs:
            self.stdout.write(f" - {path}")
        self.stdout.write(self.style.SUCCESS(f"{self.command_name} done (config {context.config_hash})"))

    @property
    def command_name(self):
        return self.__class__.__module__.rsplit(".", 1)[-1]
