#!/usr/bin/env python3
"""Adversarial robustness: defended vs undefended under 30% gradient reversal."""
import subprocess
import sys

if __name__ == "__main__":
    sys.exit(subprocess.call(
        [sys.executable, "-m", "silosched", "attack", "--preset", "desk",
         "--adv-fraction", "0.3", "--adv-mode", "reversal", *sys.argv[1:]]))
