#!/usr/bin/env python3
"""
Startup script for the CSI feedback laboratory
Checks the environment, then hands the command line to app.main
"""

import sys
from pathlib import Path


def check_environment():
    """Check if the environment is properly set up"""
    if sys.version_info < (3, 9):
        print("❌ Python 3.9 or newer is required")
        return False

    if not Path('.env').exists():
        print("ℹ️  No .env file found, using built-in defaults (see .env.example)")

    return True


def main():
    """Main startup function"""
    if not check_environment():
        sys.exit(1)

    try:
        from app import main as run
    except ImportError as e:
        print(f"❌ Import error: {e}")
        print("Make sure all dependencies are installed correctly (pip install -r requirements.txt)")
        sys.exit(1)

    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
