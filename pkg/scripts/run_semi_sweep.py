#!/usr/bin/env python3
"""Semi-synthetic negation sweep on the bundled schooling-returns stand-in.

Writes results/semi_negation.csv and its .agg.csv companion; the metric is
the fitted treatment (education) coefficient, so the robust estimator should
stay near the clean value while classical IV flips sign at every eps.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from robustgmm.cli import main

root = pathlib.Path(__file__).resolve().parents[1]
results = root / "results"
results.mkdir(exist_ok=True)
out = results / "semi_negation.csv"
code = main(
    [
        "semi-sweep",
        "--seed",
        "9000",
        "--set",
        f"input={root / 'data' / 'card_standin.csv'}",
        "--out",
        str(out),
    ]
)
print(f"wrote {out} and companion .agg.csv (exit {code})")
sys.exit(code)
