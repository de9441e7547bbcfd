"""B3 estimation engine entry point"""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
