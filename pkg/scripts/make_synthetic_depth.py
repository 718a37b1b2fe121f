"""Write synthetic depth maps (ellipse object on a ramp floor) for the toy backend.

    python scripts/make_synthetic_depth.py --out depth.snpd --size 256 --seed 0
"""
import argparse

import numpy as np

from snp import io as snp_io


def object_depth(size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    cy, cx = rng.uniform(0.35, 0.65, 2)
    ry, rx = rng.uniform(0.15, 0.3, 2)
    angle = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    r2 = (u / rx) ** 2 + (v / ry) ** 2
    body = np.where(r2 <= 1, 0.6 + 0.3 * np.sqrt(np.clip(1 - r2, 0, 1)), 0.0)
    floor = 0.1 + 0.25 * yy
    return np.maximum(body, floor)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help=".snpd or .png (16-bit) output path")
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    depth = object_depth(args.size, args.seed)
    if args.out.endswith(".png"):
        snp_io.write_depth_png(args.out, depth, bits=16)
    else:
        snp_io.write_depth(args.out, depth)
    print(f"wrote {args.out} ({args.size}x{args.size}, range {depth.min():.3f}..{depth.max():.3f})")


if __name__ == "__main__":
    main()
