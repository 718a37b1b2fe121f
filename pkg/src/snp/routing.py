"""Per-site control features and their selective routing.

A control encoder emits one residual per injection site (encoder skips plus
the middle block). Routing zeroes the sites outside a mask and optionally
scales the remaining ones by spatial weight maps before they are added to the
denoiser's own features.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractViolation

RoutingMask = frozenset
"""Set of active injection-site indices."""

# Decoder block numbering is 1-based from the lowest resolution; "mid" is the
# bottleneck. The pose-relevant blocks are the middle block and the fourth
# decoder block.
POSE_BLOCKS = ("mid", 4)


@dataclass(frozen=True)
class ControlFeatureSet:
    features: tuple
    site_resolutions: tuple

    def __post_init__(self):
        feats = tuple(np.asarray(f) for f in self.features)
        res = tuple(tuple(int(v) for v in r) for r in self.site_resolutions)
        if len(feats) != len(res):
            raise ContractViolation(
                f"{len(feats)} features but {len(res)} site resolutions"
            )
        for i, (f, r) in enumerate(zip(feats, res)):
            if f.ndim != 4:
                raise ContractViolation(f"site {i}: feature must be rank 4, got shape {f.shape}")
            if f.shape[-2:] != r:
                raise ContractViolation(
                    f"site {i}: feature spatial dims {f.shape[-2:]} != declared {r}"
                )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "site_resolutions", res)

    @property
    def site_count(self) -> int:
        return len(self.features)

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return self.features[i]

    @classmethod
    def zeros_like(cls, other: "ControlFeatureSet") -> "ControlFeatureSet":
        return cls(tuple(np.zeros_like(f) for f in other.features), other.site_resolutions)


def all_sites(site_count: int) -> RoutingMask:
    return frozenset(range(site_count))


def check_mask(mask: Iterable[int], site_count: int) -> RoutingMask:
    mask = frozenset(int(i) for i in mask)
    bad = sorted(i for i in mask if not 0 <= i < site_count)
    if bad:
        raise ContractViolation(f"routing mask sites {bad} outside 0..{site_count - 1}")
    return mask


def route_features(
    features: ControlFeatureSet,
    mask: Iterable[int],
    weights=None,
) -> ControlFeatureSet:
    """Zero the sites outside ``mask`` and scale routed sites by ``weights``.

    ``weights`` is a :class:`snp.wcm.WeightMaps` (or any mapping from site index
    to a 2-D map). Maps are single-channel and broadcast across channels.
    Routed sites without weights are passed through unchanged.
    """
    mask = check_mask(mask, features.site_count)
    maps: Optional[Mapping[int, np.ndarray]] = None
    if weights is not None:
        maps = getattr(weights, "maps", weights)

    out = []
    for i, f in enumerate(features.features):
        if i not in mask:
            out.append(np.zeros_like(f))
            continue
        if maps is None:
            out.append(f)
            continue
        if i not in maps:
            raise ContractViolation(f"site {i}: routed but no weight map supplied")
        w = np.asarray(maps[i])
        if w.shape != f.shape[-2:]:
            raise ContractViolation(
                f"site {i}: weight map shape {w.shape} != feature resolution {f.shape[-2:]}"
            )
        out.append(f * w[None, None, :, :])
    return ControlFeatureSet(tuple(out), features.site_resolutions)


def pose_sites(site_to_decoder_block: Mapping[int, object], blocks: Sequence = POSE_BLOCKS) -> RoutingMask:
    """Sites whose declared decoder block is one of ``blocks``."""
    return frozenset(site for site, block in site_to_decoder_block.items() if block in blocks)


def builtin_routing_table() -> dict:
    from .backend import TOY_SITE_TO_DECODER_BLOCK
    from .real_backend import SD15_SITE_TO_DECODER_BLOCK

    return {
        "toy-13site": pose_sites(TOY_SITE_TO_DECODER_BLOCK),
        "sd15": pose_sites(SD15_SITE_TO_DECODER_BLOCK),
        # Pose-relevant SDXL sites are not known; fill via the [routing] config section.
        "sdxl": frozenset(),
    }


def default_pose_mask(backend_id: str, table: Optional[Mapping[str, Iterable[int]]] = None) -> RoutingMask:
    """Configured pose-relevant sites for ``backend_id``.

    ``table`` entries override the built-in ones. An empty entry yields an
    empty mask with a warning.
    """
    merged = builtin_routing_table()
    if table:
        merged.update({k: frozenset(v) for k, v in table.items()})
    if backend_id not in merged:
        raise LookupError(
            f"no routing entry for backend {backend_id!r}; registered: {sorted(merged)}"
        )
    mask = frozenset(merged[backend_id])
    if not mask:
        warnings.warn(f"routing entry for {backend_id!r} is empty; no control features will be routed")
    return mask
