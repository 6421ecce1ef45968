#!/usr/bin/env python3
"""Writes data/synthetic_aerial_boxes.json: 2,000 (w, h) boxes in four
planted scale modes with aerial-like imbalance (many tiny vehicles, few
large structures)."""
import json
import sys

import numpy as np

SEED = 20240917
# (sqrt-area centre in px, box count)
MODES = [(10.0, 1000), (28.0, 500), (72.0, 350), (200.0, 150)]
SCALE_SIGMA = 0.12   # log-normal jitter of sqrt(area)
RATIO_SIGMA = 0.20   # log-normal jitter of h/w


def main(path):
    rng = np.random.default_rng(SEED)
    boxes = []
    for centre, count in MODES:
        s = centre * np.exp(rng.normal(0.0, SCALE_SIGMA, count))
        r = np.exp(rng.normal(0.0, RATIO_SIGMA, count))
        w = s / np.sqrt(r)
        h = s * np.sqrt(r)
        boxes += [[round(float(a), 2), round(float(b), 2)] for a, b in zip(w, h)]
    order = rng.permutation(len(boxes))
    boxes = [boxes[i] for i in order]
    doc = {"seed": SEED, "modes": [{"sqrt_area": c, "count": n} for c, n in MODES], "boxes": boxes}
    with open(path, "w") as f:
        json.dump(doc, f, separators=(",", ":"))
        f.write("\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/synthetic_aerial_boxes.json")
