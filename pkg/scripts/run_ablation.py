#!/usr/bin/env python3
"""Ablation suite on the desk preset: full vs the four component removals."""
import subprocess
import sys

if __name__ == "__main__":
    sys.exit(subprocess.call(
        [sys.executable, "-m", "silosched", "ablate", "--preset", "desk",
         *sys.argv[1:]]))
