#!/usr/bin/env python3
"""
ehvm
A desk-scale virtual machine and toolchain for C++-style exception handling.
"""

import os
import sys

# Add the project root to the Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.cli import main as cli_main


def main():
    """ehvm command-line entry point."""
    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
