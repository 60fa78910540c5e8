#!/usr/bin/env python3
"""
Entry point for running the dtgp command line from a source checkout.

    python scripts/dtgp_cli.py train --data data/toy.csv --layers 2 --flow steptanh
"""

import sys
from pathlib import Path

# Add the project root to Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from dtgp.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
