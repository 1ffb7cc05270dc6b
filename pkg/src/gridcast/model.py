"""The full forecaster: patch embedding + backbone + prompt learner.

forward_reconstruct runs one masked-reconstruction pass over a batch of
windows; backward_reconstruct pushes the loss gradient through the whole
stack (head, decoder, mask token, encoder, prompt networks, memory pools,
patch embedding).  The model is shape-agnostic: any (L, H, W) window works
as long as the temporal patch extent divides into the padded length.
"""

from dataclasses import dataclass, asdict

import numpy as np

from .backbone import Backbone, BackboneConfig
from .errors import GeometryError
from .masking import apply_mask
from .nn import Module
from .patching import PatchEmbed, make_geometry, patchify, positional_encoding
from .prompt import PROMPT_NAMES, PromptLearner


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters; everything the checkpoint must pin."""

    d_model: int = 96
    n_heads: int = 4
    enc_depth: int = 4
    dec_depth: int = 4
    mlp_ratio: float = 4.0
    patch: tuple = (2, 4, 4)
    d_feat: int = 8
    d_key: int = 16
    pool_size: int = 64
    enabled_prompts: tuple = PROMPT_NAMES
    softmax_pool_weights: bool = True
    init_std: float = 0.02

    def backbone_config(self):
        return BackboneConfig(self.d_model, self.n_heads, self.enc_depth,
                              self.dec_depth, self.mlp_ratio)

    def to_dict(self):
        d = asdict(self)
        d["patch"] = list(self.patch)
        d["enabled_prompts"] = list(self.enabled_prompts)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "patch" in d:
            d["patch"] = tuple(d["patch"])
        if "enabled_prompts" in d:
            d["enabled_prompts"] = tuple(d["enabled_prompts"])
        return cls(**d)


class Forecaster(Module):
    def __init__(self, cfg, rng):
        cfg.backbone_config().validate()
        l, h, w = cfg.patch
        self.cfg = cfg
        self.embed = PatchEmbed(l * h * w, cfg.d_model, rng, cfg.init_std)
        self.backbone = Backbone(cfg.backbone_config(), l * h * w, rng, cfg.init_std)
        self.prompts = PromptLearner(cfg.d_feat, cfg.d_key, cfg.d_model,
                                     cfg.pool_size, rng,
                                     enabled=cfg.enabled_prompts,
                                     softmax_weights=cfg.softmax_pool_weights)
        self._cache = None

    def geometry(self, window_shape):
        return make_geometry(window_shape, self.cfg.patch, self.cfg.d_model)

    def forward_reconstruct(self, windows, spec, prompt_inputs=None):
        """One masked-reconstruction pass.

        windows: (B, L, H, W) normalized values; spec: MaskSpec on the
        matching geometry; prompt_inputs: None to run promptless, else a dict
        with "history" (B, l_h, H, W) and optionally "period" / "ctx_mask".

        Returns (pred (B, n_tokens, block_volume), MaskedBatch, PatchGeometry).
        """
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim == 3:
            windows = windows[None]
        geom = self.geometry(windows.shape[1:])
        seq = patchify(windows, geom, self.embed)
        batch = apply_mask(seq, spec)
        pe = positional_encoding(geom)
        prompt_set = None
        if prompt_inputs is not None and self.prompts.enabled:
            prompt_set = self.prompts.generate(
                prompt_inputs["history"],
                prompt_inputs.get("period"),
                prompt_inputs.get("ctx_mask"))
        if prompt_set is not None and prompt_set.names:
            stacked = prompt_set.stacked()
            names = tuple(prompt_set.names)
        else:
            stacked, names = None, ()
        encoded = self.backbone.encode(
            batch.visible_tokens, pe[batch.visible_indices], stacked, names)
        pred = self.backbone.decode(
            encoded, len(names), batch.visible_indices, batch.masked_indices,
            pe, geom.n_tokens)
        self._cache = (batch, geom, names, windows.shape[0], prompt_set)
        return pred, batch, geom

    def backward_reconstruct(self, d_pred):
        """Push d loss / d pred back through every component."""
        batch, geom, names, B, _ = self._cache
        d_encoded = self.backbone.decode_backward(d_pred)
        d_visible, d_prompts = self.backbone.encode_backward(d_encoded)
        if d_prompts is not None:
            self.prompts.backward(
                {n: d_prompts[:, i] for i, n in enumerate(names)})
        d_tokens = np.zeros((B, geom.n_tokens, self.cfg.d_model))
        d_tokens[:, batch.visible_indices] = d_visible
        self.embed.backward(d_tokens)

    def last_prompt_set(self):
        """PromptSet from the most recent forward pass (None if promptless)."""
        return self._cache[4] if self._cache else None
