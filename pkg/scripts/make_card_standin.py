#!/usr/bin/env python3
"""Regenerate data/card_standin.csv (seeded, byte-stable)."""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from robustgmm import write_card_standin

out = pathlib.Path(__file__).resolve().parents[1] / "data" / "card_standin.csv"
out.parent.mkdir(exist_ok=True)
write_card_standin(out)
print(f"wrote {out}")
