"""Transformer encoder/decoder over patch tokens.

The encoder sees only visible tokens (positional encodings added first),
optionally with prompt tokens prepended; each prompt token is the prompt
vector plus a learnable per-component type embedding and carries no
positional encoding.  The decoder rebuilds the full token grid - encoder
outputs in the visible slots, a shared learnable mask token plus positional
encoding in the masked slots, the encoder-processed prompt tokens kept in
front - runs its own block stack (same width and depth family as the
encoder) and maps every non-prompt token to its block of voxel values
through one shared linear head.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .nn import Linear, Module, Parameter, TransformerBlock
from .prompt import PROMPT_NAMES


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 96
    n_heads: int = 4
    enc_depth: int = 4
    dec_depth: int = 4
    mlp_ratio: float = 4.0

    def validate(self):
        if self.d_model % 4 != 0:
            raise GeometryError(f"d_model must be divisible by 4, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise GeometryError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.enc_depth < 0 or self.dec_depth < 0:
            raise GeometryError("depths must be non-negative")


class Backbone(Module):
    """Masked-token encoder/decoder with a shared reconstruction head."""

    def __init__(self, cfg, block_volume, rng, std=0.02):
        cfg.validate()
        d = cfg.d_model
        self.cfg = cfg
        self.encoder = [TransformerBlock(d, cfg.n_heads, cfg.mlp_ratio, rng, std)
                        for _ in range(cfg.enc_depth)]
        self.decoder = [TransformerBlock(d, cfg.n_heads, cfg.mlp_ratio, rng, std)
                        for _ in range(cfg.dec_depth)]
        self.mask_token = Parameter(rng.normal(0.0, std, size=d))
        self.type_embed = Parameter(rng.normal(0.0, std, size=(len(PROMPT_NAMES), d)))
        self.head = Linear(d, block_volume, rng, std)
        self._cache = None

    # ------------------------------------------------------------- encoding

    def encode(self, visible_tokens, positions, prompts=None, prompt_names=()):
        """Encode visible tokens (B, n_vis, d) with their positional rows.

        prompts: (B, P, d) stacked prompt vectors in the order of
        prompt_names; each gains its component's type embedding and no
        positional encoding.  Prompt slots stay in the output so the decoder
        can attend to them.
        """
        x = visible_tokens + positions
        n_prompt = 0
        type_rows = None
        if prompts is not None and len(prompt_names) > 0:
            type_rows = np.array([PROMPT_NAMES.index(n) for n in prompt_names])
            prefix = prompts + self.type_embed.data[type_rows]
            x = np.concatenate([prefix, x], axis=1)
            n_prompt = len(prompt_names)
        for blk in self.encoder:
            x = blk.forward(x)
        self._enc_cache = (n_prompt, type_rows)
        return x

    def encode_backward(self, d_out):
        """Return (d_visible_tokens, d_prompts or None); accumulates grads."""
        n_prompt, type_rows = self._enc_cache
        for blk in reversed(self.encoder):
            d_out = blk.backward(d_out)
        if n_prompt:
            d_prefix = d_out[:, :n_prompt]
            np.add.at(self.type_embed.grad, type_rows, d_prefix.sum(axis=0))
            return d_out[:, n_prompt:], d_prefix
        return d_out, None

    # ------------------------------------------------------------- decoding

    def decode(self, encoded, n_prompt, visible_indices, masked_indices,
               positions_full, n_tokens):
        """Rebuild the full grid and predict voxel blocks per token.

        encoded: (B, n_prompt + n_vis, d) from encode(); visible rows are
        scattered back to their slots, masked slots get mask_token +
        positional encoding.  Returns (B, n_tokens, block_volume).
        """
        B, _, d = encoded.shape
        full = np.empty((B, n_tokens, d))
        full[:, visible_indices] = encoded[:, n_prompt:]
        full[:, masked_indices] = self.mask_token.data + positions_full[masked_indices]
        x = np.concatenate([encoded[:, :n_prompt], full], axis=1) if n_prompt else full
        for blk in self.decoder:
            x = blk.forward(x)
        pred = self.head.forward(x[:, n_prompt:])
        self._dec_cache = (n_prompt, visible_indices, masked_indices, n_tokens)
        return pred

    def decode_backward(self, d_pred):
        """Return gradient w.r.t. ``encoded``; accumulates parameter grads."""
        n_prompt, visible_indices, masked_indices, n_tokens = self._dec_cache
        d_grid = self.head.backward(d_pred)
        B, _, d = d_grid.shape
        if n_prompt:
            d_x = np.concatenate([np.zeros((B, n_prompt, d)), d_grid], axis=1)
        else:
            d_x = d_grid
        for blk in reversed(self.decoder):
            d_x = blk.backward(d_x)
        d_full = d_x[:, n_prompt:]
        self.mask_token.grad += d_full[:, masked_indices].sum(axis=(0, 1))
        d_encoded = np.concatenate(
            [d_x[:, :n_prompt], d_full[:, visible_indices]], axis=1)
        return d_encoded
