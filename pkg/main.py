#!/usr/bin/env python3
"""
Discrete spatial diffusion engine - main entry point.

Usage:
    python main.py --help
    python main.py kernel --width 32 --height 32 --time 0.01 --out k.dsdk
    dsd generate --ckpt model.dsdm --totals 64 --n 8 --out samples/
"""

import sys

from dsd.main import main

if __name__ == "__main__":
    sys.exit(main())
