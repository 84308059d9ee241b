#!/usr/bin/env python
"""Entry point for the rks management commands (simulate, train, odometry, slam, eval, plot_export)."""
import os
import sys

# hyphenated spellings accepted on the command line
COMMAND_ALIASES = {
    "plot-export": "plot_export",
    "benchmark-matcher": "benchmark_matcher",
}


def main(argv=None):
    argv = list(sys.argv if argv is None else argv)
    if len(argv) > 1:
        argv[1] = COMMAND_ALIASES.get(argv[1], argv[1])
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings")
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "rks needs Django; install the packages in requirements.txt into the active environment"
        ) from exc
    execute_from_command_line(argv)


if __name__ == "__main__":
    main()
