#!/usr/bin/env python3
"""Writes the bundled point-symmetric tracks.

Each track is a half circuit turning by pi, repeated once; the repeat is the half rotated by
pi, so heading and position close exactly. The last arc of each half is sized to close the
heading.
"""
import math
import pathlib
import sys

WIDTH = 0.4

# (kind, curvature, length); the final arc's length is solved for.
HALVES = {
    "train": [
        ("straight", 0, 1.0), ("arc", 2.0, 0.8), ("straight", 0, 0.4), ("arc", -2.5, 0.5),
        ("straight", 0, 0.3), ("arc", 3.0, 0.5), ("straight", 0, 0.6), ("arc", -1.5, 0.6),
        ("straight", 0, 0.4), ("arc", 2.5, None), ("straight", 0, 0.5),
    ],
    "test1": [
        ("straight", 0, 0.7), ("arc", -2.0, 0.5), ("straight", 0, 0.3), ("arc", 2.8, 0.6),
        ("straight", 0, 0.5), ("arc", -1.2, 0.4), ("arc", 2.2, None), ("straight", 0, 0.4),
    ],
    "test2": [
        ("straight", 0, 1.2), ("arc", 1.8, 0.7), ("straight", 0, 0.5), ("arc", -2.8, 0.45),
        ("straight", 0, 0.4), ("arc", 2.6, 0.6), ("straight", 0, 0.3), ("arc", -2.0, 0.7),
        ("straight", 0, 0.6), ("arc", 1.5, 0.5), ("straight", 0, 0.4), ("arc", 2.9, None),
        ("straight", 0, 0.6),
    ],
}


def solve_half(half):
    turned = sum(k * l for kind, k, l in half if l is not None and kind == "arc")
    out = []
    for kind, k, l in half:
        if l is None:
            l = (math.pi - turned) / k
            if l <= 0:
                raise SystemExit("closing arc has non-positive length")
        out.append((kind, k, l))
    return out


def main(outdir):
    outdir = pathlib.Path(outdir)
    for name, half in HALVES.items():
        segs = solve_half(half) * 2
        lines = [f"# {name}: point-symmetric circuit, generated by tools/make_tracks.py",
                 f"width {WIDTH}"]
        for kind, k, l in segs:
            lines.append(f"straight {l:.15g}" if kind == "straight" else f"arc {k:.15g} {l:.15g}")
        (outdir / f"{name}.track").write_text("\n".join(lines) + "\n")
        print(name, round(sum(l for _, _, l in segs), 4))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/tracks")
