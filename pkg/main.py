#!/usr/bin/python3
"""
Main entry point for the pgcon command-line tool.

Run `python main.py --help` for the list of commands.
"""

import sys
from src.cli import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
