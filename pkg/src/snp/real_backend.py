"""Adapter from the backend contract to a diffusers SD-1.5 + ControlNet stack.

Nothing here is imported unless a real backend is requested; ``torch`` and
``diffusers`` are optional. Wiring:

* ``predict`` runs the UNet with ``down_block_additional_residuals`` = sites
  0..11 and ``mid_block_additional_residual`` = site 12. With no control
  features the residual arguments are omitted.
* ``control_encode`` runs the ControlNet on the depth map replicated to three
  channels and returns its 13 residuals as a :class:`ControlFeatureSet`.
* ``scheduler_update`` delegates to a DDIM scheduler (deterministic, eta=0).
"""
from __future__ import annotations

import numpy as np

from .backend import DenoiserBackend
from .errors import BackendUnavailable, ContractViolation
from .routing import ControlFeatureSet

# SD-1.5 ControlNet: conv_in + 3 residuals per down level (last level has no
# downsampler) = 12 skips, consumed by up_blocks[3 - level]; site 12 is the mid block.
_SD15_LEVELS = (0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3)
SD15_SITE_TO_DECODER_BLOCK = {**{s: 4 - lv for s, lv in enumerate(_SD15_LEVELS)}, 12: "mid"}


class DiffusersControlNetBackend(DenoiserBackend):
    backend_id = "sd15"

    def __init__(self, model_id: str, controlnet_id: str, device: str = "cpu",
                 dtype: str = "float32", height: int = 512, width: int = 512):
        try:
            import torch
            from diffusers import ControlNetModel, DDIMScheduler, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise BackendUnavailable(f"real backend needs torch, diffusers and transformers: {exc}") from exc
        if not model_id or not controlnet_id:
            raise BackendUnavailable("real backend needs [real] model_id and controlnet_id")

        self.torch = torch
        self.device = torch.device(device)
        self.dtype = getattr(torch, dtype)
        try:
            self.unet = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet", torch_dtype=self.dtype)
            self.controlnet = ControlNetModel.from_pretrained(controlnet_id, torch_dtype=self.dtype)
            self.tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer")
            self.text_encoder = CLIPTextModel.from_pretrained(model_id, subfolder="text_encoder", torch_dtype=self.dtype)
            self.scheduler = DDIMScheduler.from_pretrained(model_id, subfolder="scheduler")
        except (OSError, ValueError) as exc:
            raise BackendUnavailable(f"could not load weights: {exc}") from exc
        for m in (self.unet, self.controlnet, self.text_encoder):
            m.to(self.device).eval()

        lh, lw = height // 8, width // 8
        self.latent_shape = (self.unet.config.in_channels, lh, lw)
        self.condition_shape = (height, width)
        self.site_count = 13
        self.site_resolutions = tuple((lh >> lv, lw >> lv) for lv in _SD15_LEVELS) + ((lh >> 3, lw >> 3),)
        self.site_to_decoder_block = dict(SD15_SITE_TO_DECODER_BLOCK)
        self._total_steps = None

    def set_total_steps(self, total_steps: int):
        if total_steps != self._total_steps:
            self.scheduler.set_timesteps(total_steps)
            self._total_steps = total_steps

    def _t(self, step_index):
        if self._total_steps is None:
            raise ContractViolation("call set_total_steps before sampling")
        return self.scheduler.timesteps[step_index]

    def _tensor(self, x):
        return self.torch.as_tensor(np.asarray(x), device=self.device, dtype=self.dtype)

    def encode_prompt(self, text):
        tokens = self.tokenizer(text, padding="max_length", max_length=self.tokenizer.model_max_length,
                                truncation=True, return_tensors="pt")
        with self.torch.no_grad():
            out = self.text_encoder(tokens.input_ids.to(self.device))[0]
        return out[0].float().cpu().numpy()

    def _hidden(self, prompt_embedding, batch):
        emb = self._tensor(prompt_embedding)
        if emb.ndim == 2:
            emb = emb.unsqueeze(0).expand(batch, -1, -1)
        return emb

    def predict(self, z, step_index, prompt_embedding, control=None):
        z = self.check_latent(z)
        zt = self._tensor(z)
        kwargs = {}
        if control is not None:
            res = [self._tensor(f) for f in control.features]
            kwargs = {"down_block_additional_residuals": res[:12], "mid_block_additional_residual": res[12]}
        with self.torch.no_grad():
            eps = self.unet(zt, self._t(step_index), encoder_hidden_states=self._hidden(prompt_embedding, z.shape[0]),
                            **kwargs).sample
        return eps.float().cpu().numpy().astype(np.float64)

    def control_encode(self, z, step_index, prompt_embedding, depth):
        z = self.check_latent(z)
        d = self.check_depth(depth)
        cond = self._tensor(np.broadcast_to(d, (z.shape[0], 3) + d.shape).copy())
        with self.torch.no_grad():
            down, mid = self.controlnet(self._tensor(z), self._t(step_index),
                                        encoder_hidden_states=self._hidden(prompt_embedding, z.shape[0]),
                                        controlnet_cond=cond, return_dict=False)
        feats = tuple(f.float().cpu().numpy().astype(np.float64) for f in (*down, mid))
        return ControlFeatureSet(feats, tuple(f.shape[-2:] for f in feats))

    def scheduler_update(self, z, eps, step_index, total_steps):
        self.set_total_steps(total_steps)
        out = self.scheduler.step(self._tensor(eps), self._t(step_index), self._tensor(z), eta=0.0).prev_sample
        return out.float().cpu().numpy().astype(np.float64)
