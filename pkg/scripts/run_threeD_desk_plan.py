#!/usr/bin/env python3
"""Run the threeD_desk_plan experiment pipeline (thin CLI wrapper)."""

import sys
from pathlib import Path

from prcitube.cli import main

if __name__ == "__main__":
    config = Path(__file__).resolve().parent.parent / "configs" / "threeD_desk_plan.toml"
    sys.exit(main(["pipeline", "--config", str(config), *sys.argv[1:]]))
