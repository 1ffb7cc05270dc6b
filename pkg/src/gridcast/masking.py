"""Masking strategies over the patch-token grid.

Each strategy produces a MaskSpec whose ``keep`` array marks the visible
tokens.  Counts follow the exact rule floor(ratio * applicable + 0.5); random
choices come from a seeded generator so a (strategy, ratio, seed, geometry)
tuple always yields the same mask.
"""

from dataclasses import dataclass

import numpy as np

from .errors import SizingError

STRATEGIES = ("random", "tube", "block", "temporal")


@dataclass(frozen=True)
class MaskSpec:
    strategy: str
    ratio: float
    keep: np.ndarray      # bool, shape (Lp, Hp, Wp)
    seed: object          # None for deterministic strategies

    @property
    def keep_flat(self):
        """Visibility in flat token order (time-major, row, col)."""
        return self.keep.reshape(-1)

    @property
    def masked_indices(self):
        return np.flatnonzero(~self.keep_flat)

    @property
    def visible_indices(self):
        return np.flatnonzero(self.keep_flat)


def exact_count(ratio, count):
    """floor(ratio*count + 0.5): the shared rounding rule for mask sizes."""
    return int(np.floor(ratio * count + 0.5))


def _check_ratio(ratio):
    if not 0.0 < ratio < 1.0:
        raise SizingError(f"mask ratio must lie in (0,1), got {ratio}")


def _check_nondegenerate(keep, strategy):
    n_masked = int(np.sum(~keep))
    if n_masked == 0:
        raise SizingError(f"{strategy} mask leaves no masked tokens for this geometry/ratio")
    if n_masked == keep.size:
        raise SizingError(f"{strategy} mask leaves no visible tokens for this geometry/ratio")


def random_mask(geom, ratio, seed):
    """Mask an exact count of tokens chosen by a seeded uniform shuffle."""
    _check_ratio(ratio)
    n = geom.n_tokens
    n_mask = exact_count(ratio, n)
    perm = np.random.default_rng(seed).permutation(n)
    keep = np.ones(n, dtype=bool)
    keep[perm[:n_mask]] = False
    keep = keep.reshape(geom.grid)
    _check_nondegenerate(keep, "random")
    return MaskSpec("random", ratio, keep, seed)


def tube_mask(geom, ratio, seed):
    """Mask whole spatial positions across every time slice."""
    _check_ratio(ratio)
    Lp, Hp, Wp = geom.grid
    s = Hp * Wp
    n_mask = exact_count(ratio, s)
    perm = np.random.default_rng(seed).permutation(s)
    keep_sp = np.ones(s, dtype=bool)
    keep_sp[perm[:n_mask]] = False
    keep = np.broadcast_to(keep_sp.reshape(1, Hp, Wp), (Lp, Hp, Wp)).copy()
    _check_nondegenerate(keep, "tube")
    return MaskSpec("tube", ratio, keep, seed)


def block_mask(geom, ratio, seed, extended=False):
    """Keep one spatial quadrant at all times and mask the rest.

    The quadrant is chosen by M drawn uniformly from {1, 2}: rows
    [floor((M-1)/2*Hp), floor(M/2*Hp)) and the same for columns, i.e. the
    top-left or bottom-right quarter (~75% of tokens masked).  With
    ``extended=True`` the row and column halves are drawn independently so
    all four quadrants can occur.  ``ratio`` is ignored: the quadrant rule
    fixes the masked fraction.
    """
    rng = np.random.default_rng(seed)
    Lp, Hp, Wp = geom.grid
    if extended:
        mr = int(rng.integers(1, 3))
        mc = int(rng.integers(1, 3))
    else:
        mr = mc = int(rng.integers(1, 3))
    r0, r1 = (mr - 1) * Hp // 2, mr * Hp // 2
    c0, c1 = (mc - 1) * Wp // 2, mc * Wp // 2
    keep = np.zeros((Lp, Hp, Wp), dtype=bool)
    keep[:, r0:r1, c0:c1] = True
    _check_nondegenerate(keep, "block")
    return MaskSpec("block", ratio, keep, seed)


def temporal_mask(geom, ratio):
    """Mask the trailing time slices: round(ratio * Lp) of them.  Deterministic."""
    _check_ratio(ratio)
    Lp, Hp, Wp = geom.grid
    n_mask = exact_count(ratio, Lp)
    return temporal_mask_slices(geom, n_mask, ratio=ratio)


def temporal_mask_slices(geom, n_future, ratio=None):
    """Temporal mask with an explicit count of masked trailing slices."""
    Lp, Hp, Wp = geom.grid
    if not 0 < n_future < Lp:
        raise SizingError(
            f"temporal mask needs 0 < masked slices < {Lp}, got {n_future}")
    keep = np.ones((Lp, Hp, Wp), dtype=bool)
    keep[Lp - n_future:] = False
    return MaskSpec("temporal", ratio if ratio is not None else n_future / Lp, keep, None)


_MAKERS = {
    "random": random_mask,
    "tube": tube_mask,
    "block": block_mask,
}


def make_mask(strategy, geom, ratio, seed, extended_block=False):
    """Dispatch by strategy name."""
    if strategy == "temporal":
        return temporal_mask(geom, ratio)
    if strategy not in _MAKERS:
        raise SizingError(f"unknown masking strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "block":
        return block_mask(geom, ratio, seed, extended=extended_block)
    return _MAKERS[strategy](geom, ratio, seed)


def sample_strategy(step, weights, seed=0):
    """Seeded categorical draw of a strategy name for a training step.

    The draw depends only on (seed, step) and the weights, so a fixed seed
    reproduces the whole schedule.
    """
    names = [n for n in STRATEGIES if weights.get(n, 0.0) > 0.0]
    if not names:
        raise SizingError("strategy weights sum to zero; nothing to sample")
    w = np.array([float(weights[n]) for n in names])
    p = w / w.sum()
    rng = np.random.default_rng([int(seed), int(step)])
    return names[int(rng.choice(len(names), p=p))]


@dataclass
class MaskedBatch:
    """A PatchSequence split by a MaskSpec."""

    visible_tokens: np.ndarray    # (..., n_vis, d) in ascending token order
    visible_indices: np.ndarray   # (n_vis,)
    masked_indices: np.ndarray    # (n_mask,)
    targets: np.ndarray           # (..., n_mask, block_volume) raw voxel values
    spec: object


def apply_mask(seq, spec):
    """Split a PatchSequence into visible tokens and reconstruction targets."""
    if spec.keep.shape != seq.geometry.grid:
        raise SizingError(
            f"mask grid {spec.keep.shape} does not match geometry {seq.geometry.grid}")
    vis = spec.visible_indices
    msk = spec.masked_indices
    return MaskedBatch(
        visible_tokens=seq.tokens[..., vis, :],
        visible_indices=vis,
        masked_indices=msk,
        targets=seq.blocks[..., msk, :],
        spec=spec,
    )
