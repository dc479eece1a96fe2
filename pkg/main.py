"""Entry point for the kernel extension host CLI."""

import sys

from src.cli import main


if __name__ == "__main__":
    sys.exit(main())
