"""Command-line entry point: ``snp generate | ablate | eval``.

Exit codes: 0 ok, 1 every ablation cell failed, 2 configuration or input
error, 3 backend unavailable or failing, 4 dataset incomplete.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as snp_io
from .backend import ToyBackend, ToyBackendSpec
from .config import (ConfigError, ExperimentConfig, SweepSpec, apply_overrides, dump_config, guidance_config,
                     load_config, run_id, set_value, validate)
from .errors import BackendError, BackendUnavailable, ContractViolation
from .evaluation import evaluate_dataset, missing_sidecars
from .guidance import GuidanceConfig, PromptPair, initial_latent, sample
from .wcm import DepthCondition, resize_bilinear

log = logging.getLogger("snp")

EXIT_OK, EXIT_ALL_CELLS_FAILED, EXIT_CONFIG, EXIT_BACKEND, EXIT_DATASET = 0, 1, 2, 3, 4


def make_backend(cfg: ExperimentConfig):
    kind = os.environ.get("SNP_BACKEND", "").strip() or cfg.backend.kind
    if kind == "toy":
        b = cfg.backend
        return ToyBackend(ToyBackendSpec(seed=b.seed, latent_shape=tuple(b.latent_shape), widths=tuple(b.widths),
                                         emb_dim=b.emb_dim, condition_scale=b.condition_scale))
    if kind == "real":
        from .real_backend import DiffusersControlNetBackend

        r = cfg.real
        return DiffusersControlNetBackend(r.model_id, r.controlnet_id, r.device, r.dtype, r.height, r.width)
    raise BackendUnavailable(f"unknown backend kind {kind!r} (SNP_BACKEND / backend.kind)")


def load_depth(cfg: ExperimentConfig, backend) -> DepthCondition:
    if not cfg.inputs.depth:
        raise ConfigError("no depth map given (--depth or inputs.depth)")
    path = Path(cfg.inputs.depth)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read depth map: {exc}") from None
    digest = hashlib.sha256(raw).hexdigest()
    if cfg.inputs.depth_sha256 and cfg.inputs.depth_sha256 != digest:
        raise ConfigError(f"depth file {path} does not match the recorded sha256")
    cfg.inputs.depth_sha256 = digest
    depth = snp_io.read_depth(path)
    if depth.shape != tuple(backend.condition_shape):
        log.warning("resizing depth %s -> %s to match the backend", depth.shape, backend.condition_shape)
        depth = DepthCondition(resize_bilinear(depth.depth, backend.condition_shape))
    return depth


def generate_latents(cfg: ExperimentConfig, backend, depth, guidance: GuidanceConfig = None) -> list:
    guidance = guidance or guidance_config(cfg, backend.site_count)
    prompts = PromptPair(backend.encode_prompt(cfg.inputs.prompt), backend.encode_prompt(cfg.inputs.negative_prompt))
    out = []
    for index in range(cfg.run.batch):
        noise = initial_latent(cfg.run.seed, backend.latent_shape, cfg.run.steps, index)
        out.append(sample(noise, prompts, depth, guidance, backend))
    return out


def write_cell(cell_dir: Path, cfg: ExperimentConfig, latents) -> list:
    cell_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, z in enumerate(latents):
        p = cell_dir / f"{index}.lat"
        snp_io.write_latent(p, z)
        paths.append(p)
    (cell_dir / "manifest.cfg").write_text(dump_config(cfg))
    return paths


def _resolve(args) -> ExperimentConfig:
    flags = []
    for attr, path in (("depth", "inputs.depth"), ("prompt", "inputs.prompt"),
                       ("negative_prompt", "inputs.negative_prompt"), ("seed", "run.seed"), ("out", "run.out")):
        value = getattr(args, attr, None)
        if value is not None:
            flags.append((path, str(value)))
    cfg = load_config(args.config, overrides=())
    for path, value in flags:
        set_value(cfg, path, value, source="command line")
    apply_overrides(cfg, args.set or ())
    validate(cfg)
    return cfg


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    backend = make_backend(cfg)
    depth = load_depth(cfg, backend)
    latents = generate_latents(cfg, backend, depth)
    rid = run_id(cfg)
    paths = write_cell(Path(cfg.run.out) / rid / "base", cfg, latents)
    for p in paths:
        print(p)
    return EXIT_OK


def _l2(a, b) -> float:
    return float(np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(a, b))))


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    sweep = SweepSpec.parse(args.sweep or ())
    sweep.check(cfg)
    backend = make_backend(cfg)
    depth = load_depth(cfg, backend)
    root = Path(cfg.run.out) / run_id(cfg, sweep.describe())

    # reference endpoints: no control at all, and vanilla ControlNet
    plain = generate_latents(cfg, backend, depth, GuidanceConfig.plain_cfg(cfg.guidance.scale))
    vanilla = generate_latents(cfg, backend, depth, GuidanceConfig.vanilla_controlnet(cfg.guidance.scale))

    rows = []
    for name, assign in sweep.cells():
        cell = cfg.copy()
        for path, value in assign:
            set_value(cell, path, value, source="--sweep")
        row = {"cell": name, **{p: v for p, v in assign}}
        try:
            latents = generate_latents(cell, backend, depth)
            write_cell(root / name, cell, latents)
            digest = hashlib.sha256(b"".join(np.ascontiguousarray(z, "<f8").tobytes() for z in latents)).hexdigest()
            row.update(status="ok", sha256=digest[:16], l2_to_plain=_l2(latents, plain),
                       l2_to_vanilla=_l2(latents, vanilla))
        except (BackendError, ContractViolation, FloatingPointError) as exc:
            log.error("cell %s failed: %s", name, exc)
            row.update(status=f"failed: {exc}")
        rows.append(row)

    rows.sort(key=lambda r: r["cell"])
    root.mkdir(parents=True, exist_ok=True)
    (root / "summary.json").write_text(json.dumps(rows, indent=2))
    table = format_table(rows)
    (root / "summary.txt").write_text(table)
    print(table, end="")
    print(root)
    if rows and all(r["status"] != "ok" for r in rows):
        return EXIT_ALL_CELLS_FAILED
    return EXIT_OK


def format_table(rows) -> str:
    cols = ["cell", "status", "l2_to_plain", "l2_to_vanilla", "sha256"]
    fmt = lambda v: f"{v:.6f}" if isinstance(v, float) else str(v)
    cells = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    root = Path(args.root)
    if not root.is_dir():
        print(f"dataset root {root} is not a directory", file=sys.stderr)
        return EXIT_DATASET
    if args.mode in ("fid", "full") and args.reference is None:
        print("--reference is required for fid/full modes", file=sys.stderr)
        return EXIT_CONFIG
    missing = missing_sidecars(root, args.mode, args.reference)
    if missing:
        print("missing files for mode %s:" % args.mode, file=sys.stderr)
        for m in missing:
            print(f"  {m}", file=sys.stderr)
        return EXIT_DATASET
    report = evaluate_dataset(root, args.mode, args.reference, args.bin_width)
    out = Path(args.out) if args.out else root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snp", description="Depth-conditioned pose-preserving guidance.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--set", action="append", metavar="PATH=VALUE", help="override a config value (repeatable)")
        p.add_argument("--depth")
        p.add_argument("--prompt")
        p.add_argument("--negative-prompt", dest="negative_prompt")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    g = sub.add_parser("generate", help="sample latents for one configuration")
    run_args(g)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("ablate", help="run a cartesian sweep of configurations")
    run_args(a)
    a.add_argument("--sweep", action="append", metavar="PATH=V1,V2|START:STOP:STEP")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="compute pose error, CLIP similarity and FID for a dataset")
    e.add_argument("root")
    e.add_argument("--mode", choices=("pose", "clip", "fid", "full"), default="full")
    e.add_argument("--reference", help="reference dataset root (for fid)")
    e.add_argument("--bin-width", type=float, default=30.0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendUnavailable as exc:
        print(f"backend unavailable: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
