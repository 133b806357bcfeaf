# drmatch.py
"""
Entry point for the drmatch command line.
Usage: python drmatch.py <estimate|balance|simulate|coverage|grid> [options]
"""

import sys

from modules.cli import main

if __name__ == "__main__":
    sys.exit(main())
