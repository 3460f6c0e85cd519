#!/usr/bin/env python3
"""
riskswitch: risk-sensitive portfolio solver

Subcommands
- validate: check a run configuration against the model assumptions
- solve: psi grid, optimal wealth and the h_theta / u* table
- oracle: Monte-Carlo comparison of the solver at the configured probe points
- sweep: optimal wealth over v, T or theta with monotonicity checks
- residual: PDE residual of the solved grid

Example
    python main.py solve --config src/configs/three_regime.json --out psi.csv

This script must be run from the repository root.
"""
from __future__ import annotations

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
