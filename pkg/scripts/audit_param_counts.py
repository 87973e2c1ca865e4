#!/usr/bin/env python3
"""Compare preset parameter totals against the published model sizes."""

import sys

from mlcsc.cli import main

if __name__ == "__main__":
    sys.exit(main(["paramcount", *sys.argv[1:]]))
