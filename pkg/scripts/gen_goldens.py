"""Regenerate tests/goldens.json.

Freezes the measured quality of the degree-30 relu fit on the interval the
bundled fixture actually calibrates to (first relu layer), so a regression
in either the fitting or the calibration path fails loudly.  The acceptance
test allows a 1 percent margin over these values to absorb platform
differences in transcendental functions; any real regression is orders of
magnitude larger.

Usage: python3 scripts/gen_goldens.py
"""

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from polydnn.approx import (  # noqa: E402
    ApproxSpec,
    approx_activation,
    calibrate_intervals,
)
from polydnn.model import (  # noqa: E402
    RELU,
    fold_batch_norm,
    load_dataset,
    load_model,
)

HERE = os.path.dirname(__file__)
OUT = os.path.join(HERE, "..", "tests", "goldens.json")
FIXTURES = os.path.join(HERE, "..", "tests", "fixtures")

DEGREE = 30


def main():
    m = fold_batch_norm(load_model(os.path.join(FIXTURES,
                                                "tiny_bn_mlp.json")))
    data = load_dataset(os.path.join(FIXTURES, "tiny_samples.csv"))
    radius = calibrate_intervals(m, data.inputs)[0]
    _, report = approx_activation(RELU, ApproxSpec(degree=DEGREE,
                                                   radius=radius))
    doc = {
        "relu_fit": {
            "degree": DEGREE,
            "radius": radius,
            "grid_points": report.grid_points,
            "max_abs_error": report.max_abs_error,
            "mean_abs_error": report.mean_abs_error,
        }
    }
    with open(OUT, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"relu degree {DEGREE} on [-{radius:.4f}, {radius:.4f}]: "
          f"max {report.max_abs_error:.6e}  mean {report.mean_abs_error:.6e}")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
