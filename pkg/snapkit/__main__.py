"""Package entry point for running with python -m snapkit"""

import sys

from .app import main

if __name__ == "__main__":
    sys.exit(main())
