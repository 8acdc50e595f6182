#!/usr/bin/env python3
"""Run the pinned verification suite from a fresh checkout.

Thin wrapper over ``pathineq suite`` that prepends src/ to sys.path so it
works without installing the package.  All suite flags pass through:

    python scripts/run_suite.py --out runs --parallel 4
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from pathineq.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main(["suite", *sys.argv[1:]]))
