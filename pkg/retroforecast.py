#!/usr/bin/env python3
"""Launcher: python retroforecast.py <subcommand> [options]"""
import sys

from backend.core.main import main

if __name__ == "__main__":
    sys.exit(main())
