#!/usr/bin/env python3
"""Run the full expressivity verification suite and print the row table.

Thin wrapper over `pngnn expressivity-suite` with heavier default budgets
(more parameter draws, more fuzz formulas) for an overnight-strength run.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from pngnn.cli import main


if __name__ == "__main__":
    argv = ["expressivity-suite", "--draws", "20", "--fuzz", "100"]
    argv += sys.argv[1:]
    sys.exit(main(argv))
