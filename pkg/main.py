"""
Federated taxi-demand prediction simulator.

Entry point for the generate / prepare / train / sweep / compare commands;
see src/app/cli.py for the flags and the output layout.

    python main.py generate --out out/run
    python main.py prepare --out out/run
    python main.py train --mode federated --out out/run
"""

import sys

from src.app.cli import main

if __name__ == "__main__":
    sys.exit(main())
