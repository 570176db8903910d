#!/usr/bin/env python3
"""Run the temphase CLI from a source checkout."""

from __future__ import annotations

from temphase.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
