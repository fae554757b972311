import sys

from branching.cli import run

sys.exit(run())
