#!/usr/bin/env python3
"""Django's command-line utility for the coda_mediation commands and tests."""
import sys

from coda_mediation.cli import run_cli


def main():
    sys.exit(run_cli(sys.argv[1:], prog=sys.argv[0]))


if __name__ == '__main__':
    main()
