"""Guided denoising step and sampling loop.

One step combines a positive and a negative noise prediction with
classifier-free guidance. Control features enter in three configurable ways:

* a gate keeps the control encoder active only for the first ``lambda_t``
  fraction of the sampling run;
* the negative branch can run without control features (the default), so
  guidance pulls from "negative prompt, no condition" toward "positive prompt
  plus condition";
* features are routed to a subset of injection sites and optionally damped
  near depth edges by weight maps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BackendError, ContractViolation, NonFiniteLatentError
from .routing import check_mask, route_features
from .wcm import DepthCondition, WcmConfig, build_weight_maps

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatentState:
    latent: np.ndarray
    step_index: int = 0
    total_steps: int = 1

    def __post_init__(self):
        z = np.asarray(self.latent)
        if z.ndim != 4:
            raise ContractViolation(f"latent must be rank 4 [B, C, H, W], got shape {z.shape}")
        if self.total_steps < 1 or not 0 <= self.step_index < self.total_steps:
            raise ContractViolation(f"step {self.step_index} outside 0..{self.total_steps - 1}")
        if not np.all(np.isfinite(z)):
            raise NonFiniteLatentError(self.step_index)
        object.__setattr__(self, "latent", z)


@dataclass(frozen=True)
class PromptPair:
    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        pos, neg = np.asarray(self.positive), np.asarray(self.negative)
        if pos.shape != neg.shape:
            raise ContractViolation(f"positive embedding {pos.shape} and negative {neg.shape} differ in shape")
        object.__setattr__(self, "positive", pos)
        object.__setattr__(self, "negative", neg)


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance settings. ``routing_mask=None`` routes every site."""

    scale_s: float = 7.5
    lambda_t: float = 0.3
    use_negative_control: bool = False
    routing_mask: Optional[frozenset] = None
    wcm: Optional[WcmConfig] = None

    def __post_init__(self):
        if not self.scale_s > 0:
            raise ContractViolation(f"guidance scale must be > 0, got {self.scale_s}")
        if not 0.0 <= self.lambda_t <= 1.0:
            raise ContractViolation(f"lambda_t must lie in [0, 1], got {self.lambda_t}")
        if self.routing_mask is not None:
            object.__setattr__(self, "routing_mask", frozenset(int(i) for i in self.routing_mask))

    @classmethod
    def vanilla_controlnet(cls, scale_s: float = 7.5) -> "GuidanceConfig":
        return cls(scale_s=scale_s, lambda_t=1.0, use_negative_control=True)

    @classmethod
    def plain_cfg(cls, scale_s: float = 7.5) -> "GuidanceConfig":
        return cls(scale_s=scale_s, lambda_t=0.0)

    def mask_for(self, site_count: int) -> frozenset:
        if self.routing_mask is None:
            return frozenset(range(site_count))
        return check_mask(self.routing_mask, site_count)


def cfg_combine(eps_pos, eps_neg, s: float) -> np.ndarray:
    """``eps_neg + s * (eps_pos - eps_neg)``; exactly ``eps_pos`` when s == 1."""
    eps_pos, eps_neg = np.asarray(eps_pos), np.asarray(eps_neg)
    if eps_pos.shape != eps_neg.shape:
        raise ContractViolation(f"eps_pos shape {eps_pos.shape} != eps_neg shape {eps_neg.shape}")
    if not s > 0:
        raise ContractViolation(f"guidance scale must be > 0, got {s}")
    if s == 1:
        return eps_pos.copy()
    return eps_neg + s * (eps_pos - eps_neg)


def control_active(step_index: int, total_steps: int, lambda_t: float) -> bool:
    """True while sampling progress ``step_index / total_steps`` is below ``lambda_t``.

    Step 0 is the noisiest step.
    """
    if total_steps < 1 or not 0 <= step_index < total_steps:
        raise ContractViolation(f"step {step_index} outside 0..{total_steps - 1}")
    if not 0.0 <= lambda_t <= 1.0:
        raise ContractViolation(f"lambda_t must lie in [0, 1], got {lambda_t}")
    return step_index / total_steps < lambda_t


def _as_condition(condition) -> DepthCondition:
    return condition if isinstance(condition, DepthCondition) else DepthCondition(condition)


def prepare_weights(condition, config: GuidanceConfig, backend):
    if config.wcm is None:
        return None
    mask = config.mask_for(backend.site_count)
    return build_weight_maps(_as_condition(condition), backend.site_resolutions, config.wcm, sites=mask)


def snp_step(state: LatentState, prompts: PromptPair, condition, config: GuidanceConfig, backend,
             weights=None) -> np.ndarray:
    """Guided noise prediction for one step.

    ``weights`` may carry precomputed weight maps; otherwise they are built
    from ``condition`` when ``config.wcm`` is set.
    """
    z = backend.check_latent(state.latent)
    condition = _as_condition(condition)
    backend.check_depth(condition)
    i = state.step_index
    if weights is None:
        weights = prepare_weights(condition, config, backend)
    mask = config.mask_for(backend.site_count)

    try:
        if not control_active(i, state.total_steps, config.lambda_t):
            eps_pos = backend.predict(z, i, prompts.positive, None)
            eps_neg = backend.predict(z, i, prompts.negative, None)
        else:
            feats = backend.control_encode(z, i, prompts.positive, condition)
            eps_pos = backend.predict(z, i, prompts.positive, route_features(feats, mask, weights))
            if config.use_negative_control:
                feats_neg = backend.control_encode(z, i, prompts.negative, condition)
                eps_neg = backend.predict(z, i, prompts.negative, route_features(feats_neg, mask, weights))
            else:
                eps_neg = backend.predict(z, i, prompts.negative, None)
    except ContractViolation:
        raise
    except Exception as exc:
        raise BackendError(f"backend failed at step {i}/{state.total_steps}: {exc}") from exc

    eps = cfg_combine(eps_pos, eps_neg, config.scale_s)
    if eps.shape != z.shape:
        raise ContractViolation(f"prediction shape {eps.shape} != latent shape {z.shape}")
    return eps


def sample(initial_noise: LatentState, prompts: PromptPair, condition, config: GuidanceConfig, backend,
           callback: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """Run the full loop from step 0 and return the final latent.

    ``callback(step_index, latent)`` sees the latent after each update.
    """
    if initial_noise.step_index != 0:
        raise ContractViolation("sampling must start at step 0")
    n = initial_noise.total_steps
    condition = _as_condition(condition)
    weights = prepare_weights(condition, config, backend)
    backend.set_total_steps(n)
    z = initial_noise.latent
    for i in range(n):
        eps = snp_step(LatentState(z, i, n), prompts, condition, config, backend, weights=weights)
        z = backend.scheduler_update(z, eps, i, n)
        if not np.all(np.isfinite(z)):
            raise NonFiniteLatentError(i)
        if callback is not None:
            callback(i, z)
    log.debug("sampled %d steps, final latent std %.4g", n, float(np.std(z)))
    return z


def initial_latent(seed: int, shape, total_steps: int, index: int = 0) -> LatentState:
    """Standard-normal starting latent for batch element ``index``."""
    rng = np.random.default_rng([int(seed), int(index)])
    return LatentState(rng.standard_normal((1, *shape)), 0, total_steps)
