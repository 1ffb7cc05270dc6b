"""Knowledge-guided prompts: extraction networks and key-value memory pools.

Four prompt vectors are generated per window:

- sc: closeness of the spatial context (3x3 conv over the time-pooled map)
- sh: hierarchy of the spatial context (parallel 5/9/17 convs, averaged)
- tc: closeness in time (attention pooling over the history frames)
- tp: daily-period pattern (attention pooling over same-time-of-day slices
      from previous days; falls back to tc when no context exists)

Each extractor emits a d_key query; querying a learnable key-value memory
pool returns a softmax-weighted convex combination of pool values, which is
the prompt injected into the backbone.  sc/sh share the spatial pool, tc/tp
the temporal pool.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .nn import (AttentionPool, Conv2dSame, Gelu, Linear, Module, Parameter,
                 softmax, softmax_backward)

PROMPT_NAMES = ("sc", "sh", "tc", "tp")
SCALES = (5, 9, 17)


def _fan_in_std(fan_in):
    """Variance-preserving weight scale for a layer with ``fan_in`` inputs.

    The prompt queries pass through several layers before the pool lookup;
    with a flat tiny init the query magnitude collapses, every softmax over
    the pool comes out uniform, and the gradient can never differentiate the
    entries.  Fan-in scaling keeps the query at data scale so retrieval is
    input-dependent from the first step.
    """
    return 1.0 / np.sqrt(fan_in)


class MemoryPool(Module):
    """Learnable keys (N, d_key) and values (N, d_model) addressed by content.

    Keys are drawn at the variance-preserving scale 1/sqrt(d_key) so the
    scaled scores start at order one — small enough that attention over the
    pool opens near uniform, large enough that it differentiates within the
    first training steps.  Value rows are independent draws at scale
    ``std``: each entry starts as a distinct direction, so every retrieved
    prompt is a genuinely different token and each knowledge component
    earns its own contribution during tuning.
    """

    def __init__(self, n_entries, d_key, d_model, rng, std=0.1):
        self.keys = Parameter(
            rng.normal(0.0, _fan_in_std(d_key), size=(n_entries, d_key)))
        self.values = Parameter(rng.normal(0.0, std, size=(n_entries, d_model)))

    @property
    def n_entries(self):
        return self.keys.shape[0]

    def query(self, q, softmax_weights=True):
        """q: (B, d_key) -> (weights (B, N), prompt (B, d_model), cache).

        weights = softmax(keys . q / sqrt(d_key)); with softmax_weights=False
        the scaled raw scores are used directly (ablation mode).
        """
        q = np.atleast_2d(q)
        scale = 1.0 / np.sqrt(self.keys.shape[1])
        scores = q @ self.keys.data.T * scale
        w = softmax(scores, axis=-1) if softmax_weights else scores
        prompt = w @ self.values.data
        return w, prompt, (q, w, scale, softmax_weights)

    def query_backward(self, cache, d_prompt, d_weights=None):
        """Accumulate key/value gradients; return d_query (B, d_key)."""
        q, w, scale, soft = cache
        dw = d_prompt @ self.values.data.T
        if d_weights is not None:
            dw = dw + d_weights
        self.values.grad += w.T @ d_prompt
        ds = softmax_backward(w, dw) if soft else dw
        ds = ds * scale
        self.keys.grad += ds.T @ q
        return ds @ self.keys.data


def query_pool(pool, query, softmax_weights=True):
    """Functional form: (weights, prompt) for a batch (or single) query."""
    w, prompt, _ = pool.query(query, softmax_weights=softmax_weights)
    return w, prompt


class SpatialKnowledge(Module):
    """Per-cell attention pooling over time, then conv paths for sc and sh.

    The time-pooled map E_s (d_feat, H, W) is the spatial context; a 3x3
    conv -> GELU -> global average pool -> projection yields the sc query,
    and three parallel convs at kernel sizes 5/9/17 yield one query per
    scale.  The nonlinearity before each spatial mean matters: without it
    the pooling collapses to a linear map of the field's mean, which is
    exactly zero for zero-mean patterns, blinding the query to them.
    """

    def __init__(self, d_feat, d_key, rng):
        self.lift = Linear(1, d_feat, rng, _fan_in_std(1))
        self.lift_act = Gelu()
        self.pool_time = AttentionPool(d_feat, rng, 0.2)
        self.conv_close = Conv2dSame(d_feat, d_feat, 3, rng,
                                     _fan_in_std(9 * d_feat))
        self.act_close = Gelu()
        self.proj_close = Linear(d_feat, d_key, rng, _fan_in_std(d_feat))
        self.convs_scale = [
            Conv2dSame(d_feat, d_feat, ks, rng, _fan_in_std(ks * ks * d_feat))
            for ks in SCALES]
        self.acts_scale = [Gelu() for _ in SCALES]
        self.projs_scale = [Linear(d_feat, d_key, rng, _fan_in_std(d_feat))
                            for _ in SCALES]
        self._cache = None

    def context_map(self, x):
        """x: (B, L, H, W) -> E_s (B, d_feat, H, W) by pooling each cell over time."""
        B, L, H, W = x.shape
        z = self.lift_act.forward(self.lift.forward(x[..., None]))  # (B,L,H,W,F)
        F = z.shape[-1]
        zt = z.transpose(0, 2, 3, 1, 4).reshape(B * H * W, L, F)
        pooled = self.pool_time.forward(zt)                    # (B*H*W, F)
        es = pooled.reshape(B, H, W, F).transpose(0, 3, 1, 2)  # (B,F,H,W)
        self._map_shape = (B, L, H, W, F)
        return es

    def context_map_backward(self, d_es):
        B, L, H, W, F = self._map_shape
        d_pooled = d_es.transpose(0, 2, 3, 1).reshape(B * H * W, F)
        d_zt = self.pool_time.backward(d_pooled)
        d_z = d_zt.reshape(B, H, W, L, F).transpose(0, 3, 1, 2, 4)
        d_x = self.lift.backward(self.lift_act.backward(d_z))[..., 0]
        return d_x

    def forward(self, x, want_sc=True, want_sh=True):
        """Return (E_sc (B,d_key) or None, E_sh (B,3,d_key) or None)."""
        es = self.context_map(x)
        B, F = es.shape[0], es.shape[1]
        hw = es.shape[2] * es.shape[3]
        e_sc = None
        if want_sc:
            c = self.act_close.forward(self.conv_close.forward(es))
            e_sc = self.proj_close.forward(c.mean(axis=(2, 3)))
        e_sh = None
        if want_sh:
            outs = []
            for conv, act, proj in zip(self.convs_scale, self.acts_scale,
                                       self.projs_scale):
                ci = act.forward(conv.forward(es))
                outs.append(proj.forward(ci.mean(axis=(2, 3))))
            e_sh = np.stack(outs, axis=1)
        self._cache = (es.shape, hw, want_sc, want_sh)
        return e_sc, e_sh

    def backward(self, d_sc, d_sh):
        es_shape, hw, want_sc, want_sh = self._cache
        d_es = np.zeros(es_shape)
        if want_sc and d_sc is not None:
            dg = self.proj_close.backward(d_sc)                # (B,F)
            d_act = np.broadcast_to(dg[:, :, None, None] / hw, es_shape)
            d_es += self.conv_close.backward(self.act_close.backward(d_act))
        if want_sh and d_sh is not None:
            for i, (conv, act, proj) in enumerate(
                    zip(self.convs_scale, self.acts_scale, self.projs_scale)):
                dg = proj.backward(d_sh[:, i])
                d_act = np.broadcast_to(dg[:, :, None, None] / hw, es_shape)
                d_es += conv.backward(act.backward(d_act))
        return self.context_map_backward(d_es)


class TemporalKnowledge(Module):
    """Attention networks over the history frames (tc) and period slices (tp)."""

    def __init__(self, d_feat, d_key, rng):
        self.lift_c = Linear(1, d_feat, rng, _fan_in_std(1))
        self.act_c = Gelu()
        self.pool_c = AttentionPool(d_feat, rng, 0.2)
        self.proj_c = Linear(d_feat, d_key, rng, _fan_in_std(d_feat))
        self.lift_p = Linear(1, d_feat, rng, _fan_in_std(1))
        self.act_p = Gelu()
        self.pool_within = AttentionPool(d_feat, rng, 0.2)
        self.pool_days = AttentionPool(d_feat, rng, 0.2)
        self.proj_p = Linear(d_feat, d_key, rng, _fan_in_std(d_feat))
        self._cache = None

    def forward(self, x_c, x_p=None, ctx_mask=None, want_tp=True):
        """x_c: (B, M, H, W); x_p: (B, N, M, H, W) rows valid where ctx_mask.

        Returns (E_tc (B, d_key), E_tp (B, d_key) or None).  Rows without
        period context fall back to E_tp := E_tc.
        """
        B, M, H, W = x_c.shape
        zc = self.act_c.forward(self.lift_c.forward(x_c[..., None]))
        fc = zc.mean(axis=(2, 3))                      # (B,M,F)
        hc = self.pool_c.forward(fc)                   # (B,F)
        e_tc = self.proj_c.forward(hc)
        cache = {"c_shape": zc.shape, "tp": None}
        e_tp = None
        if want_tp:
            if x_p is None or ctx_mask is None or not ctx_mask.any():
                e_tp = e_tc.copy()
                cache["tp"] = "fallback_all"
            else:
                N = x_p.shape[1]
                F = zc.shape[-1]
                zp = self.act_p.forward(self.lift_p.forward(x_p[..., None]))
                fp = zp.mean(axis=(3, 4))                  # (B,N,M,F)
                rp = self.pool_within.forward(fp.reshape(B * N, M, F))
                day_vecs = rp.reshape(B, N, F)
                hp = self.pool_days.forward(day_vecs)      # (B,F)
                e_net = self.proj_p.forward(hp)
                mask = ctx_mask[:, None]
                e_tp = np.where(mask, e_net, e_tc)
                cache["tp"] = (zp.shape, ctx_mask)
        self._cache = cache
        return e_tc, e_tp

    def backward(self, d_tc, d_tp):
        cache = self._cache
        d_tc_total = np.array(d_tc, copy=True)
        if cache["tp"] is not None and d_tp is not None:
            if cache["tp"] == "fallback_all":
                d_tc_total += d_tp
            else:
                zp_shape, ctx_mask = cache["tp"]
                B, N, M, H, W, F = zp_shape
                mask = ctx_mask[:, None]
                d_tc_total += np.where(mask, 0.0, d_tp)   # fallback rows
                d_net = np.where(mask, d_tp, 0.0)
                d_hp = self.proj_p.backward(d_net)
                d_day = self.pool_days.backward(d_hp)             # (B,N,F)
                d_rp = self.pool_within.backward(d_day.reshape(B * N, F))
                d_fp = d_rp.reshape(B, N, M, F)
                d_zp = np.broadcast_to(
                    d_fp[:, :, :, None, None, :] / (H * W), zp_shape)
                self.lift_p.backward(self.act_p.backward(d_zp))
        d_hc = self.proj_c.backward(d_tc_total)
        d_fc = self.pool_c.backward(d_hc)
        B, M, H, W, F = cache["c_shape"]
        d_zc = np.broadcast_to(d_fc[:, :, None, None, :] / (H * W), (B, M, H, W, F))
        d_xc = self.lift_c.backward(self.act_c.backward(d_zc))[..., 0]
        return d_xc


@dataclass
class PromptSet:
    """Per-window prompt vectors and their pool weights, by component name."""

    prompts: dict     # name -> (B, d_model)
    weights: dict     # name -> (B, N)

    @property
    def names(self):
        return [n for n in PROMPT_NAMES if n in self.prompts]

    def stacked(self):
        """(B, P, d_model) in canonical component order."""
        return np.stack([self.prompts[n] for n in self.names], axis=1)


class PromptLearner(Module):
    """Everything prompt-side: extraction networks plus the two memory pools."""

    def __init__(self, d_feat, d_key, d_model, pool_size, rng,
                 enabled=PROMPT_NAMES, softmax_weights=True):
        bad = set(enabled) - set(PROMPT_NAMES)
        if bad:
            raise GeometryError(f"unknown prompt components {sorted(bad)}")
        self.spatial_net = SpatialKnowledge(d_feat, d_key, rng)
        self.temporal_net = TemporalKnowledge(d_feat, d_key, rng)
        self.spatial_pool = MemoryPool(pool_size, d_key, d_model, rng)
        self.temporal_pool = MemoryPool(pool_size, d_key, d_model, rng)
        self.enabled = tuple(n for n in PROMPT_NAMES if n in enabled)
        self.softmax_weights = softmax_weights
        self._cache = None

    def generate(self, history, period=None, ctx_mask=None):
        """Build the enabled prompts for a batch of windows.

        history: (B, l_h, H, W); period: (B, N_days, l_h, H, W) with rows valid
        where ctx_mask (bool, (B,)) is True.  Returns a PromptSet.
        """
        history = np.asarray(history, dtype=np.float64)
        if history.ndim != 4:
            raise GeometryError(f"history must be (B, L, H, W), got {history.shape}")
        want_sc = "sc" in self.enabled
        want_sh = "sh" in self.enabled
        want_tc = "tc" in self.enabled
        want_tp = "tp" in self.enabled
        prompts, weights, caches = {}, {}, {}
        if want_sc or want_sh:
            e_sc, e_sh = self.spatial_net.forward(history, want_sc, want_sh)
            if want_sc:
                w, p, cache = self.spatial_pool.query(e_sc, self.softmax_weights)
                prompts["sc"], weights["sc"], caches["sc"] = p, w, cache
            if want_sh:
                B = e_sh.shape[0]
                w3, p3, cache = self.spatial_pool.query(
                    e_sh.reshape(B * len(SCALES), -1), self.softmax_weights)
                prompts["sh"] = p3.reshape(B, len(SCALES), -1).mean(axis=1)
                weights["sh"] = w3.reshape(B, len(SCALES), -1).mean(axis=1)
                caches["sh"] = cache
        if want_tc or want_tp:
            e_tc, e_tp = self.temporal_net.forward(history, period, ctx_mask, want_tp)
            if want_tc:
                w, p, cache = self.temporal_pool.query(e_tc, self.softmax_weights)
                prompts["tc"], weights["tc"], caches["tc"] = p, w, cache
            if want_tp:
                w, p, cache = self.temporal_pool.query(e_tp, self.softmax_weights)
                prompts["tp"], weights["tp"], caches["tp"] = p, w, cache
        self._cache = (caches, want_sc, want_sh, want_tc, want_tp)
        return PromptSet(prompts=prompts, weights=weights)

    def backward(self, d_prompts):
        """d_prompts: name -> (B, d_model) for some subset of the enabled names."""
        caches, want_sc, want_sh, want_tc, want_tp = self._cache
        d_sc = d_sh = None
        if want_sc:
            d = d_prompts.get("sc")
            if d is not None:
                d_sc = self.spatial_pool.query_backward(caches["sc"], d)
        if want_sh:
            d = d_prompts.get("sh")
            if d is not None:
                B = d.shape[0]
                n_s = len(SCALES)
                # the mean over scales sends 1/3 of the gradient to each query
                d_rep = np.repeat(d / n_s, n_s, axis=0)
                d_q = self.spatial_pool.query_backward(caches["sh"], d_rep)
                d_sh = d_q.reshape(B, n_s, -1)
        if d_sc is not None or d_sh is not None:
            self.spatial_net.backward(d_sc, d_sh)
        d_tc = d_tp = None
        if want_tc:
            d = d_prompts.get("tc")
            if d is not None:
                d_tc = self.temporal_pool.query_backward(caches["tc"], d)
        if want_tp:
            d = d_prompts.get("tp")
            if d is not None:
                d_tp = self.temporal_pool.query_backward(caches["tp"], d)
        if d_tc is not None or d_tp is not None:
            if d_tc is None:
                d_tc = np.zeros_like(d_tp)
            self.temporal_net.backward(d_tc, d_tp)
