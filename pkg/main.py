import sys

from src.domd_bench.cli import main

if __name__ == "__main__":
    sys.exit(main())
