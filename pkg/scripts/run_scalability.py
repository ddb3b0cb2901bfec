#!/usr/bin/env python3
"""Scalability sweep over the silo count for full vs naive averaging."""
import subprocess
import sys

if __name__ == "__main__":
    sys.exit(subprocess.call(
        [sys.executable, "-m", "silosched", "scale", "--preset", "desk",
         *sys.argv[1:]]))
