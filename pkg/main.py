"""Main application entry point."""
import sys

from app.cli import main

# ==================== Application Entry Point ====================

if __name__ == "__main__":
    sys.exit(main())
