#!/usr/bin/env python
"""Entry point for running the toolkit as a module"""

import sys

from xai_eval.cli import main


if __name__ == "__main__":
    sys.exit(main())
