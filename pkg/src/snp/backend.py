"""Denoiser backend contract and the deterministic toy backend.

The toy backend is a small affine U-Net with the same 13 control-injection
sites as an SD-1.5 ControlNet: conv-in plus three features per resolution
level on the encoder side (12 skips) and one middle-block feature. Its
parameters come from a SplitMix64 stream so any implementation that follows
the documented generation order reproduces them bit for bit.

Parameter generation
--------------------
Values are drawn from ``SplitMix64(seed)`` in the order listed by
:meth:`ToyBackend.parameter_layout`, each tensor filled in row-major order.
A raw 64-bit output ``x`` maps to ``((x >> 11) * 2**-53) * 0.2 - 0.1``.
The parameter-block checksum is the SHA-256 of all values concatenated as
little-endian float64.
"""
from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractViolation
from .routing import ControlFeatureSet

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """Vectorised SplitMix64 stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.count = 0

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.count + 1, self.count + n + 1, dtype=np.uint64)
        self.count += n
        z = np.uint64(self.seed) + k * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int, scale: float = 0.1) -> np.ndarray:
        """Floats in ``[-scale, scale)``."""
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u * (2 * scale) - scale


class DenoiserBackend(abc.ABC):
    """What the guidance loop needs from a latent-diffusion + ControlNet stack.

    Implementations declare ``site_count``, ``site_resolutions``,
    ``site_to_decoder_block``, ``latent_shape`` (C, H, W), ``condition_shape``
    (H, W) and ``backend_id`` (key into the routing table).
    """

    backend_id: str
    site_count: int
    site_resolutions: tuple
    site_to_decoder_block: dict
    latent_shape: tuple
    condition_shape: tuple

    def set_total_steps(self, total_steps: int):
        """Hook for stateful schedulers; called once before a sampling run."""

    @abc.abstractmethod
    def encode_prompt(self, text: str) -> np.ndarray: ...

    @abc.abstractmethod
    def predict(self, z, step_index: int, prompt_embedding, control: Optional[ControlFeatureSet] = None) -> np.ndarray:
        """Noise prediction; ``control`` features are added at their sites."""

    @abc.abstractmethod
    def control_encode(self, z, step_index: int, prompt_embedding, depth) -> ControlFeatureSet: ...

    @abc.abstractmethod
    def scheduler_update(self, z, eps, step_index: int, total_steps: int) -> np.ndarray: ...

    def check_latent(self, z) -> np.ndarray:
        z = np.asarray(z)
        if z.ndim != 4 or tuple(z.shape[1:]) != tuple(self.latent_shape):
            raise ContractViolation(
                f"latent shape {z.shape} does not match backend (B, {', '.join(map(str, self.latent_shape))})"
            )
        return z

    def check_depth(self, depth) -> np.ndarray:
        d = np.asarray(getattr(depth, "depth", depth))
        if d.shape != tuple(self.condition_shape):
            raise ContractViolation(
                f"depth resolution {d.shape} != backend condition resolution {tuple(self.condition_shape)}"
            )
        return d


@dataclass(frozen=True)
class ToyBackendSpec:
    seed: int = 42
    latent_shape: tuple = (4, 32, 32)
    site_count: int = 13
    widths: tuple = (8, 16, 16, 32)
    emb_dim: int = 16
    condition_scale: int = 8

    def __post_init__(self):
        c, h, w = self.latent_shape
        if self.site_count != 13:
            raise ContractViolation("the toy layout has exactly 13 injection sites")
        if len(self.widths) != 4:
            raise ContractViolation("widths must list one channel count per resolution level")
        if h % 8 or w % 8:
            raise ContractViolation(f"latent spatial dims {(h, w)} must be divisible by 8")


# site -> (level, width index); level 0 is full latent resolution
_SITE_LEVELS = (0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 3)
TOY_SITE_TO_DECODER_BLOCK = {
    **{s: 4 - _SITE_LEVELS[s] for s in range(12)},
    12: "mid",
}
# Encoder layers producing skips 0..11, as (name, in_level, out_level, downsample first)
_ENCODER = (
    ("in", None, 0, False),
    ("e0a", 0, 0, False),
    ("e0b", 0, 0, False),
    ("d1", 0, 1, True),
    ("e1a", 1, 1, False),
    ("e1b", 1, 1, False),
    ("d2", 1, 2, True),
    ("e2a", 2, 2, False),
    ("e2b", 2, 2, False),
    ("d3", 2, 3, True),
    ("e3a", 3, 3, False),
    ("e3b", 3, 3, False),
)
# Decoder consumes skips deepest first, one affine merge per skip
_DECODER_ORDER = (11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0)


def _down(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _up(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


class ToyBackend(DenoiserBackend):
    backend_id = "toy-13site"

    def __init__(self, spec: ToyBackendSpec = ToyBackendSpec()):
        self.spec = spec
        c, h, w = spec.latent_shape
        self.latent_shape = (c, h, w)
        self.site_count = 13
        self.site_resolutions = tuple((h >> lv, w >> lv) for lv in _SITE_LEVELS)
        self.site_widths = tuple(spec.widths[lv] for lv in _SITE_LEVELS)
        self.site_to_decoder_block = dict(TOY_SITE_TO_DECODER_BLOCK)
        self.condition_shape = (h * spec.condition_scale, w * spec.condition_scale)
        self.params = self._generate()

    # -- parameters -------------------------------------------------------

    def parameter_layout(self):
        """Ordered (name, shape) list defining the parameter stream."""
        c = self.latent_shape[0]
        wd = self.spec.widths
        e = self.spec.emb_dim
        layout = []

        def affine(name, cin, cout):
            layout.extend([
                (f"{name}.W", (cout, cin)),
                (f"{name}.b", (cout,)),
                (f"{name}.P", (cout, e)),
                (f"{name}.t", (cout,)),
            ])

        for prefix in ("E", "C"):
            for name, lin, lout, _ in _ENCODER:
                cin = c if lin is None else wd[lin]
                affine(f"{prefix}.{name}", cin, wd[lout])
            affine(f"{prefix}.mid", wd[3], wd[3])
        affine("C.hint", 1, wd[0])
        for site in range(13):
            affine(f"C.zero{site}", self.site_widths[site], self.site_widths[site])
        cur = wd[3]
        for site in _DECODER_ORDER:
            sw = self.site_widths[site]
            affine(f"D.h{site}", cur, sw)
            layout.append((f"D.s{site}.W", (sw, sw)))
            cur = sw
        affine("D.out", wd[0], c)
        return layout

    def _generate(self):
        rng = SplitMix64(self.spec.seed)
        params = {}
        for name, shape in self.parameter_layout():
            params[name] = rng.uniform(int(np.prod(shape))).reshape(shape)
        return params

    def parameter_block(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in self.parameter_layout()])

    def parameter_checksum(self) -> str:
        return hashlib.sha256(self.parameter_block().astype("<f8").tobytes()).hexdigest()

    # -- building blocks ---------------------------------------------------

    def _bias(self, name, emb, step_index):
        p = self.params
        bias = p[f"{name}.b"] + emb @ p[f"{name}.P"].T + p[f"{name}.t"] * (0.01 * step_index)
        return bias[:, :, None, None]

    def _affine(self, name, x, emb, step_index):
        y = np.einsum("oc,bchw->bohw", self.params[f"{name}.W"], x)
        return y + self._bias(name, emb, step_index)

    def _embedding(self, prompt_embedding, batch):
        emb = np.asarray(prompt_embedding, dtype=np.float64)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (batch, emb.shape[0]))
        if emb.shape != (batch, self.spec.emb_dim):
            raise ContractViolation(
                f"prompt embedding shape {np.shape(prompt_embedding)} incompatible with "
                f"batch {batch} and emb_dim {self.spec.emb_dim}"
            )
        return emb

    def _encode(self, prefix, z, emb, step_index, hint=None):
        feats = []
        h = z
        for name, _, _, down in _ENCODER:
            if down:
                h = _down(h)
            h = self._affine(f"{prefix}.{name}", h, emb, step_index)
            if hint is not None and name == "in":
                h = h + hint
            feats.append(h)
        feats.append(self._affine(f"{prefix}.mid", h, emb, step_index))
        return feats

    # -- contract ----------------------------------------------------------

    def encode_prompt(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = SplitMix64(int.from_bytes(digest[:8], "little"))
        return rng.uniform(self.spec.emb_dim, scale=1.0)

    def predict(self, z, step_index, prompt_embedding, control=None):
        z = self.check_latent(z)
        emb = self._embedding(prompt_embedding, z.shape[0])
        feats = self._encode("E", z, emb, step_index)
        if control is not None:
            if len(control) != self.site_count:
                raise ContractViolation(f"expected {self.site_count} control features, got {len(control)}")
            for i in range(self.site_count):
                if control[i].shape != feats[i].shape:
                    raise ContractViolation(
                        f"site {i}: control shape {control[i].shape} != feature shape {feats[i].shape}"
                    )
                feats[i] = feats[i] + control[i]
        h = feats[12]
        for site in _DECODER_ORDER:
            if h.shape[-2:] != feats[site].shape[-2:]:
                h = _up(h)
            h = self._affine(f"D.h{site}", h, emb, step_index)
            h = h + np.einsum("oc,bchw->bohw", self.params[f"D.s{site}.W"], feats[site])
        return self._affine("D.out", h, emb, step_index)

    def control_encode(self, z, step_index, prompt_embedding, depth):
        z = self.check_latent(z)
        d = self.check_depth(depth).astype(np.float64)
        emb = self._embedding(prompt_embedding, z.shape[0])
        f = self.spec.condition_scale
        hh, ww = self.latent_shape[1:]
        pooled = d.reshape(hh, f, ww, f).mean(axis=(1, 3))
        hint = self._affine("C.hint", pooled[None, None], emb, step_index)
        feats = self._encode("C", z, emb, step_index, hint=hint)
        out = tuple(self._affine(f"C.zero{i}", x, emb, step_index) for i, x in enumerate(feats))
        return ControlFeatureSet(out, self.site_resolutions)

    def scheduler_update(self, z, eps, step_index, total_steps):
        z = np.asarray(z)
        eps = np.asarray(eps)
        if z.shape != eps.shape:
            raise ContractViolation(f"latent shape {z.shape} != prediction shape {eps.shape}")
        if not 0 <= step_index < total_steps:
            raise ContractViolation(f"step {step_index} outside 0..{total_steps - 1}")
        sigmas = np.linspace(1.0, 0.0, total_steps + 1)
        return z - (sigmas[step_index] - sigmas[step_index + 1]) * eps
