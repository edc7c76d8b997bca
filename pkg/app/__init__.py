"""Committee deliberation engine: protocol, storage, analysis and command line."""
