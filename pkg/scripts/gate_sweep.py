"""Sweep the gate threshold against negative-branch control on the toy backend.

For every (lambda_t, use_negative_control) cell, samples a batch of latents
and reports the mean L2 distance to plain CFG (no control anywhere) and to
full ControlNet guidance. Prints a table and optionally writes JSON.

    python scripts/gate_sweep.py --steps 20 --seeds 4 --json sweep.json
"""
import argparse
import itertools
import json

import numpy as np

from snp.backend import ToyBackend
from snp.guidance import GuidanceConfig, PromptPair, initial_latent, sample
from snp.routing import default_pose_mask
from snp.wcm import WcmConfig

from make_synthetic_depth import object_depth


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--lambdas", default="0,0.1,0.2,0.3,0.5,1.0")
    ap.add_argument("--routing", choices=("pose", "all"), default="pose")
    ap.add_argument("--wcm", action="store_true", help="weight routed features with edge maps")
    ap.add_argument("--prompt", default="a pig standing on grass, photorealistic")
    ap.add_argument("--negative-prompt", default="blurry, low quality")
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    backend = ToyBackend()
    prompts = PromptPair(backend.encode_prompt(args.prompt), backend.encode_prompt(args.negative_prompt))
    depth = object_depth(backend.condition_shape[0], 0)
    mask = default_pose_mask("toy-13site") if args.routing == "pose" else None
    wcm = WcmConfig() if args.wcm else None
    starts = [initial_latent(s, backend.latent_shape, args.steps) for s in range(1, args.seeds + 1)]

    def run(cfg):
        return np.stack([sample(z0, prompts, depth, cfg, backend) for z0 in starts])

    plain = run(GuidanceConfig.plain_cfg())
    vanilla = run(GuidanceConfig.vanilla_controlnet())
    rows = []
    lambdas = [float(v) for v in args.lambdas.split(",")]
    for lam, neg in itertools.product(lambdas, (False, True)):
        out = run(GuidanceConfig(lambda_t=lam, use_negative_control=neg, routing_mask=mask, wcm=wcm))
        rows.append({"lambda_t": lam, "use_negative_control": neg,
                     "l2_to_plain": float(np.mean(np.linalg.norm((out - plain).reshape(len(starts), -1), axis=1))),
                     "l2_to_vanilla": float(np.mean(np.linalg.norm((out - vanilla).reshape(len(starts), -1), axis=1)))})

    print(f"{'lambda_t':>8} {'neg ctrl':>8} {'L2->plain':>11} {'L2->vanilla':>12}")
    for r in rows:
        print(f"{r['lambda_t']:>8.2f} {str(r['use_negative_control']):>8} {r['l2_to_plain']:>11.4f} "
              f"{r['l2_to_vanilla']:>12.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"steps": args.steps, "seeds": args.seeds, "routing": args.routing,
                       "wcm": bool(args.wcm), "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
