#!/usr/bin/env python
"""Command-line entry point: every experiment runs as a management command."""
import os
import sys


def main():
    """Run gen_truth, train_source, probe_lrh, distill, separation, report or migrate."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'core.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Install the packages in requirements.txt "
            "into the active environment first."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
