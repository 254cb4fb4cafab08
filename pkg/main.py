#!/usr/bin/env python3
"""
Main entry point for the longitudinal treatment-effect toolkit.

Usage:
    python main.py analyze --data trial.csv [--boot B] [--out report.json]
    python main.py simulate [--scenario FILE] [--replicates R] [--workers W]
    python main.py report --inputs "reports/*.json"
    python main.py generate --out trial.csv
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
