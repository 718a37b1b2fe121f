"""Build a synthetic evaluation dataset in the layout ``snp eval`` reads.

Each item gets ``<id>.png``, ``<id>.pose.json`` (ground truth), ``<id>.est.json``
(the stand-in estimator's prediction: ground truth plus Gaussian noise),
``<id>.clip.json`` and ``<id>.feat``. Useful for exercising the evaluation
harness without a pose network or CLIP model.

    python scripts/make_eval_dataset.py --out data/eval_demo --count 64 --noise 8
    python scripts/make_eval_dataset.py --out data/eval_ref --count 64 --seed 1
    snp eval data/eval_demo --mode full --reference data/eval_ref
"""
import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image

from snp.evaluation import PoseAngles, write_feat


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=32)
    ap.add_argument("--noise", type=float, default=5.0, help="estimator noise, degrees")
    ap.add_argument("--feat-dim", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        stem = root / f"{i:04d}"
        gt = PoseAngles(*rng.uniform([-180, -60, -30], [180, 60, 30]))
        est = PoseAngles(*(np.array([gt.yaw, gt.pitch, gt.roll]) + rng.normal(0, args.noise, 3)))
        Image.fromarray(rng.integers(0, 255, (32, 32, 3), dtype=np.uint8)).save(f"{stem}.png")
        Path(f"{stem}.pose.json").write_text(json.dumps({"yaw": gt.yaw, "pitch": gt.pitch, "roll": gt.roll}))
        Path(f"{stem}.est.json").write_text(json.dumps({"yaw": est.yaw, "pitch": est.pitch, "roll": est.roll}))
        prompt_vec = rng.standard_normal(args.feat_dim)
        image_vec = prompt_vec + 0.5 * rng.standard_normal(args.feat_dim)
        Path(f"{stem}.clip.json").write_text(json.dumps({"image": image_vec.tolist(), "prompt": prompt_vec.tolist()}))
        write_feat(f"{stem}.feat", rng.standard_normal(args.feat_dim))
    print(f"wrote {args.count} items to {root}")


if __name__ == "__main__":
    main()
