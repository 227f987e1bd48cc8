#!/usr/bin/env python3
"""
Entry point for running vidsem as a module: python -m vidsem
"""

from .cli import main

if __name__ == '__main__':
    main()
