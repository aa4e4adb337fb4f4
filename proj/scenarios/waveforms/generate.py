#!/usr/bin/env python3
"""Regenerates the waveform tables used by the example scenarios."""
import json
import math
import os

HERE = os.path.dirname(os.path.abspath(__file__))


def write(name, points, loop_mode):
    doc = {"name": name, "points": [round(p, 9) for p in points], "offset": 0.0, "scale": 1.0,
           "loop_mode": loop_mode}
    with open(os.path.join(HERE, name + ".json"), "w") as f:
        json.dump(doc, f, separators=(",", ":"))
        f.write("\n")


def main():
    # booster dipole: 4167 points of 80 us, 60 A injection to 860 A extraction
    n = 4167
    write("booster_sine", [460.0 - 400.0 * math.cos(2 * math.pi * k / n) for k in range(n)], "loop")
    # quadrupole wobble: 2500 points of 80 us around 60 A
    n = 2500
    write("wobble_5hz", [60.0 + 2.0 * math.sin(2 * math.pi * k / n) for k in range(n)], "loop")


if __name__ == "__main__":
    main()
