"""Pose error, CLIP similarity, Frechet distance and binned pose reports.

Pose estimators and embedding models are external; they are reached through
small adapters that map a dataset item to angles or vectors.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation, NumericalError

AXES = ("yaw", "pitch", "roll")


def canonical_angle(a: float) -> float:
    """Wrap degrees into [-180, 180)."""
    return (float(a) + 180.0) % 360.0 - 180.0


def wrapped_diff(a: float, b: float) -> float:
    d = abs(canonical_angle(a) - canonical_angle(b))
    return min(d, 360.0 - d)


@dataclass(frozen=True)
class PoseAngles:
    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        for ax in AXES:
            v = float(getattr(self, ax))
            if not math.isfinite(v):
                raise ContractViolation(f"{ax} is not finite")
            object.__setattr__(self, ax, canonical_angle(v))

    @classmethod
    def from_dict(cls, d) -> "PoseAngles":
        return cls(d["yaw"], d["pitch"], d["roll"])


def axis_errors(pred: PoseAngles, gt: PoseAngles) -> dict:
    return {ax: wrapped_diff(getattr(pred, ax), getattr(gt, ax)) for ax in AXES}


def pose_error(pred: PoseAngles, gt: PoseAngles) -> float:
    """Mean of the wrapped absolute yaw, pitch and roll differences (degrees)."""
    e = axis_errors(pred, gt)
    return (e["yaw"] + e["pitch"] + e["roll"]) / 3.0


def clip_similarity(image_embedding, prompt_embedding) -> float:
    u = np.asarray(image_embedding, dtype=np.float64).ravel()
    v = np.asarray(prompt_embedding, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ContractViolation(f"embedding dimensions differ: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ContractViolation("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _stats(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractViolation(f"need at least 2 vectors of shape [n, d], got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("feature vectors contain non-finite values")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False, ddof=1))


def _psd_sqrt(m: np.ndarray, tol: float):
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    scale = max(float(np.abs(vals).max(initial=0.0)), 1.0)
    if vals.min(initial=0.0) < -tol * scale:
        raise NumericalError(
            f"matrix is not positive semi-definite: min eigenvalue {vals.min():.3e}, "
            f"max {vals.max():.3e}, condition ~{scale / max(abs(vals.min()), 1e-300):.3e}"
        )
    return vecs, np.sqrt(np.clip(vals, 0.0, None))


def frechet_distance(a, b, tol: float = 1e-8) -> float:
    """Frechet distance between Gaussian fits (unbiased covariance) of two sets.

    The trace of (Sa Sb)^(1/2) is taken as the trace of the root of the
    symmetric product Sa^(1/2) Sb Sa^(1/2), which has the same eigenvalues.
    """
    mu_a, sa = _stats(a)
    mu_b, sb = _stats(b)
    if mu_a.shape != mu_b.shape:
        raise ContractViolation(f"feature dimensions differ: {mu_a.shape[0]} vs {mu_b.shape[0]}")
    vecs, roots = _psd_sqrt(sa, tol)
    sa_half = (vecs * roots) @ vecs.T
    _, prod_roots = _psd_sqrt(sa_half @ sb @ sa_half, tol)
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * prod_roots.sum())
    if not math.isfinite(fd):
        raise NumericalError("Frechet distance is not finite")
    return max(fd, 0.0)


def bin_label(angle: float, width: float) -> str:
    lo = -180.0 + math.floor((canonical_angle(angle) + 180.0) / width) * width
    return f"[{lo:g},{lo + width:g})"


def binned_pose_report(pairs: Sequence, bin_width: float = 30.0) -> dict:
    """Mean wrapped errors grouped by ground-truth yaw (rotation) and pitch (elevation).

    ``pairs`` holds ``(gt, pred)`` tuples. Each bin reports the error on its
    own axis (``mean_error``), the three-axis mean, and the count.
    """
    if bin_width <= 0 or abs(360.0 / bin_width - round(360.0 / bin_width)) > 1e-9:
        raise ContractViolation(f"bin width {bin_width} must divide 360")
    report = {}
    for group, axis in (("rotation", "yaw"), ("elevation", "pitch")):
        acc = defaultdict(lambda: [0, 0.0, 0.0])
        for gt, pred in pairs:
            key = bin_label(getattr(gt, axis), bin_width)
            cell = acc[key]
            cell[0] += 1
            cell[1] += wrapped_diff(getattr(pred, axis), getattr(gt, axis))
            cell[2] += pose_error(pred, gt)
        report[group] = {
            k: {"count": n, "mean_error": s / n, "mean_pose_error": p / n}
            for k, (n, s, p) in sorted(acc.items(), key=lambda kv: float(kv[0][1:].split(",")[0]))
        }
    return report


@dataclass
class EvalReport:
    count: int = 0
    mean_pose_error: Optional[float] = None
    mean_axis_errors: Optional[dict] = None
    clip_similarity: Optional[float] = None
    fid: Optional[float] = None
    bins: dict = field(default_factory=dict)
    bin_width: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"samples            {self.count}"]
        if self.mean_pose_error is not None:
            lines.append(f"pose error (deg)   {self.mean_pose_error:.4f}")
            for ax in AXES:
                lines.append(f"  {ax:<17}{self.mean_axis_errors[ax]:.4f}")
        if self.clip_similarity is not None:
            lines.append(f"CLIP similarity    {self.clip_similarity:.6f}")
        if self.fid is not None:
            lines.append(f"FID                {self.fid:.6f}")
        for group, cells in self.bins.items():
            lines.append("")
            lines.append(f"{group} (bin width {self.bin_width:g})")
            lines.append(f"  {'bin':<14}{'n':>6}{'axis err':>12}{'pose err':>12}")
            for k, c in cells.items():
                lines.append(f"  {k:<14}{c['count']:>6}{c['mean_error']:>12.4f}{c['mean_pose_error']:>12.4f}")
        return "\n".join(lines) + "\n"


def summarize_poses(pairs: Sequence, bin_width: float = 30.0) -> EvalReport:
    rep = EvalReport(count=len(pairs), bin_width=bin_width)
    if pairs:
        errs = [axis_errors(pred, gt) for gt, pred in pairs]
        rep.mean_axis_errors = {ax: float(np.mean([e[ax] for e in errs])) for ax in AXES}
        rep.mean_pose_error = float(np.mean([pose_error(pred, gt) for gt, pred in pairs]))
    rep.bins = binned_pose_report(pairs, bin_width)
    return rep


# -- dataset adapters -------------------------------------------------------

def read_feat(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) % 4:
        raise ContractViolation(f"{path}: size {len(data)} is not a multiple of 4")
    return np.frombuffer(data, dtype="<f4").astype(np.float64)


def write_feat(path, vec) -> None:
    Path(path).write_bytes(np.asarray(vec, dtype="<f4").tobytes())


class SidecarPoseEstimator:
    """Stand-in pose estimator reading ``<id>.est.json`` next to each image."""

    suffix = ".est.json"

    def sidecar(self, image_path: Path) -> Path:
        return image_path.with_name(image_path.stem + self.suffix)

    def __call__(self, image_path: Path) -> PoseAngles:
        return PoseAngles.from_dict(json.loads(self.sidecar(image_path).read_text()))


class SidecarClipEmbedder:
    """Stand-in CLIP embedder reading ``<id>.clip.json`` with ``image`` and ``prompt`` vectors."""

    suffix = ".clip.json"

    def sidecar(self, image_path: Path) -> Path:
        return image_path.with_name(image_path.stem + self.suffix)

    def __call__(self, image_path: Path):
        d = json.loads(self.sidecar(image_path).read_text())
        return np.asarray(d["image"], dtype=np.float64), np.asarray(d["prompt"], dtype=np.float64)


def dataset_ids(root) -> list:
    return sorted(p.stem for p in Path(root).glob("*.png"))


def missing_sidecars(root, mode: str, reference=None, estimator=None, embedder=None) -> list:
    root = Path(root)
    estimator = estimator or SidecarPoseEstimator()
    embedder = embedder or SidecarClipEmbedder()
    missing = []
    for i in dataset_ids(root):
        img = root / f"{i}.png"
        needs = []
        if mode in ("pose", "full"):
            needs += [root / f"{i}.pose.json", estimator.sidecar(img)]
        if mode in ("clip", "full"):
            needs.append(embedder.sidecar(img))
        if mode in ("fid", "full"):
            needs.append(root / f"{i}.feat")
        missing += [str(p) for p in needs if not p.exists()]
    if mode in ("fid", "full") and reference is not None:
        ref = Path(reference)
        missing += [str(ref / f"{i}.feat") for i in dataset_ids(ref) if not (ref / f"{i}.feat").exists()]
    return missing


def evaluate_dataset(root, mode: str = "full", reference=None, bin_width: float = 30.0,
                     estimator=None, embedder=None) -> EvalReport:
    """Evaluate a dataset directory; items are processed in sorted id order."""
    root = Path(root)
    estimator = estimator or SidecarPoseEstimator()
    embedder = embedder or SidecarClipEmbedder()
    ids = dataset_ids(root)
    rep = EvalReport(count=len(ids), bin_width=bin_width)
    if mode in ("pose", "full"):
        pairs = []
        for i in ids:
            gt = PoseAngles.from_dict(json.loads((root / f"{i}.pose.json").read_text()))
            pairs.append((gt, estimator(root / f"{i}.png")))
        pose = summarize_poses(pairs, bin_width)
        rep.mean_pose_error, rep.mean_axis_errors, rep.bins = pose.mean_pose_error, pose.mean_axis_errors, pose.bins
    if mode in ("clip", "full") and ids:
        sims = [clip_similarity(*embedder(root / f"{i}.png")) for i in ids]
        rep.clip_similarity = float(np.mean(sims))
    if mode in ("fid", "full"):
        if reference is None:
            raise ContractViolation("Frechet distance needs a reference dataset")
        feats = np.stack([read_feat(root / f"{i}.feat") for i in ids])
        ref_ids = dataset_ids(reference)
        ref = np.stack([read_feat(Path(reference) / f"{i}.feat") for i in ref_ids])
        rep.fid = frechet_distance(feats, ref)
    return rep
