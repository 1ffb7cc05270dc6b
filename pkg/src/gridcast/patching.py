"""Tokenisation of grid series into non-overlapping voxel blocks.

A window of shape (L, H, W) is zero-padded on the high side of each axis to
the next multiple of the patch extents (l, h, w), cut into blocks, and each
block's l*h*w values are mapped to a d_model vector by a single shared affine
map (exactly a 3-D convolution with kernel == stride == patch).  Token order
is time-major, then grid row, then grid column.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .nn import Linear, Module


@dataclass(frozen=True)
class PatchGeometry:
    """Patch extents, padded token-grid shape, and original window extents."""

    patch: tuple          # (l, h, w)
    grid: tuple           # (Lp, Hp, Wp) after padding
    orig: tuple           # (L, H, W) before padding
    d_model: int

    @property
    def n_tokens(self):
        Lp, Hp, Wp = self.grid
        return Lp * Hp * Wp

    @property
    def block_volume(self):
        l, h, w = self.patch
        return l * h * w

    @property
    def padded(self):
        (l, h, w), (Lp, Hp, Wp) = self.patch, self.grid
        return (Lp * l, Hp * h, Wp * w)


def make_geometry(shape, patch, d_model):
    """Build a PatchGeometry for a window of shape (L, H, W).

    Extents that do not divide by the patch are padded up to the next
    multiple; the original extents are kept for cropping after unpatchify.
    """
    if len(shape) != 3 or len(patch) != 3:
        raise GeometryError(f"shape and patch must be length 3, got {shape} / {patch}")
    if any(p <= 0 for p in patch) or any(s <= 0 for s in shape):
        raise GeometryError(f"extents must be positive, got shape={shape} patch={patch}")
    if d_model % 4 != 0:
        raise GeometryError(f"d_model must be divisible by 4, got {d_model}")
    grid = tuple(-(-s // p) for s, p in zip(shape, patch))
    return PatchGeometry(patch=tuple(patch), grid=grid, orig=tuple(shape), d_model=d_model)


def token_index(geom, tp, hp, wp):
    """Flat token index of grid coordinate (tp, hp, wp): time-major, row, col."""
    Lp, Hp, Wp = geom.grid
    if not (0 <= tp < Lp and 0 <= hp < Hp and 0 <= wp < Wp):
        raise GeometryError(f"coordinate ({tp},{hp},{wp}) outside grid {geom.grid}")
    return (tp * Hp + hp) * Wp + wp


def token_coords(geom, idx):
    """Inverse of token_index."""
    Lp, Hp, Wp = geom.grid
    if not 0 <= idx < geom.n_tokens:
        raise GeometryError(f"token index {idx} outside [0, {geom.n_tokens})")
    tp, rem = divmod(idx, Hp * Wp)
    hp, wp = divmod(rem, Wp)
    return tp, hp, wp


def pad_to_geometry(x, geom):
    """Zero-pad the trailing (L, H, W) axes up to the padded extents."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != geom.orig:
        raise GeometryError(f"window extents {x.shape[-3:]} do not match geometry {geom.orig}")
    target = geom.padded
    widths = [(0, 0)] * (x.ndim - 3) + [(0, t - s) for s, t in zip(geom.orig, target)]
    if all(w == (0, 0) for w in widths):
        return x
    return np.pad(x, widths)


def extract_blocks(x, geom):
    """Cut a window into raw voxel blocks: (..., L, H, W) -> (..., n, l*h*w).

    Pads internally, so ``unpatchify(extract_blocks(x), geom)`` reproduces x
    bit-exactly for any extents.
    """
    x = pad_to_geometry(x, geom)
    lead = x.shape[:-3]
    (l, h, w), (Lp, Hp, Wp) = geom.patch, geom.grid
    x = x.reshape(*lead, Lp, l, Hp, h, Wp, w)
    nd = x.ndim
    perm = tuple(range(nd - 6)) + (nd - 6, nd - 4, nd - 2, nd - 5, nd - 3, nd - 1)
    x = x.transpose(perm)
    return np.ascontiguousarray(x).reshape(*lead, geom.n_tokens, geom.block_volume)


def unpatchify(blocks, geom):
    """Scatter token values back onto the grid; exact inverse of extract_blocks."""
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.shape[-2:] != (geom.n_tokens, geom.block_volume):
        raise GeometryError(
            f"blocks shape {blocks.shape[-2:]} does not match geometry "
            f"({geom.n_tokens}, {geom.block_volume})")
    lead = blocks.shape[:-2]
    (l, h, w), (Lp, Hp, Wp) = geom.patch, geom.grid
    x = blocks.reshape(*lead, Lp, Hp, Wp, l, h, w)
    nd = x.ndim
    perm = tuple(range(nd - 6)) + (nd - 6, nd - 3, nd - 5, nd - 2, nd - 4, nd - 1)
    x = x.transpose(perm)
    x = np.ascontiguousarray(x).reshape(*lead, *geom.padded)
    L, H, W = geom.orig
    return x[..., :L, :H, :W]


def positional_encoding(geom):
    """Deterministic sine-cosine encoding of every token's (tp, hp, wp).

    Channel layout: the first d_model/2 channels encode the temporal index,
    the next d_model/4 the grid row, the last d_model/4 the grid column.
    Each group interleaves sin/cos pairs that share a frequency, so every row
    has Euclidean norm sqrt(d_model/2).
    """
    d = geom.d_model
    if d % 4 != 0:
        raise GeometryError(f"d_model must be divisible by 4, got {d}")
    Lp, Hp, Wp = geom.grid
    tp, hp, wp = np.meshgrid(np.arange(Lp), np.arange(Hp), np.arange(Wp), indexing="ij")
    parts = [
        _sinusoid(tp.reshape(-1), d // 2),
        _sinusoid(hp.reshape(-1), d // 4),
        _sinusoid(wp.reshape(-1), d // 4),
    ]
    return np.concatenate(parts, axis=-1)


def _sinusoid(pos, d):
    """Interleaved sin/cos encoding of integer positions into d channels."""
    j = np.arange(d // 2)
    freq = 1.0 / (10000.0 ** (2.0 * j / d))
    ang = pos[:, None] * freq[None, :]
    out = np.empty((pos.shape[0], d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class PatchEmbed(Module):
    """Shared affine map from raw voxel blocks to d_model tokens."""

    def __init__(self, block_volume, d_model, rng, std=0.02):
        self.proj = Linear(block_volume, d_model, rng, std)

    def forward(self, blocks):
        return self.proj.forward(blocks)

    def backward(self, dtokens):
        return self.proj.backward(dtokens)


@dataclass
class PatchSequence:
    """Embedded tokens plus the raw blocks they came from."""

    tokens: np.ndarray    # (..., n, d_model)
    blocks: np.ndarray    # (..., n, l*h*w) raw voxel values
    geometry: PatchGeometry


def patchify(x, geom, embed):
    """Window(s) -> PatchSequence under the given geometry and embedding."""
    blocks = extract_blocks(x, geom)
    return PatchSequence(tokens=embed.forward(blocks), blocks=blocks, geometry=geom)
