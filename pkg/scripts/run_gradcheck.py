#!/usr/bin/env python3
"""Audit the gradient engine against central differences (all suites)."""

import sys

from mlcsc.cli import main

if __name__ == "__main__":
    sys.exit(main(["gradcheck", *sys.argv[1:]]))
