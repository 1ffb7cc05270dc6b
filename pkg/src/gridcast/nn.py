"""Minimal neural-network layers on numpy arrays with explicit backward passes.

Every layer follows the same contract: ``forward`` stores whatever the
backward pass needs on the instance, ``backward`` consumes the incoming
output gradient, accumulates parameter gradients in place and returns the
input gradient.  A layer instance is therefore used at most once per
training step.  All math is float64.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Parameter:
    """A trainable array together with its accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter(shape={self.data.shape})"


class Module:
    """Base class providing recursive parameter discovery.

    Parameters are found by walking instance attributes (sorted by name for
    a stable ordering), descending into sub-modules and lists of modules.
    """

    def named_parameters(self, prefix=""):
        out = {}
        for name in sorted(vars(self)):
            obj = getattr(self, name)
            key = f"{prefix}{name}"
            if isinstance(obj, Parameter):
                out[key] = obj
            elif isinstance(obj, Module):
                out.update(obj.named_parameters(prefix=key + "."))
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{key}.{i}."))
                    elif isinstance(item, Parameter):
                        out[f"{key}.{i}"] = item
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad[...] = 0.0


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p, dp, axis=-1):
    """Gradient through softmax given its output ``p`` and upstream ``dp``."""
    inner = np.sum(dp * p, axis=axis, keepdims=True)
    return p * (dp - inner)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


class Linear(Module):
    """Affine map on the last axis: y = x @ W + b."""

    def __init__(self, d_in, d_out, rng, std=0.02, bias=True):
        self.W = Parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.b = Parameter(np.zeros(d_out)) if bias else None
        self._x = None

    def forward(self, x):
        self._x = x
        y = x @ self.W.data
        if self.b is not None:
            y = y + self.b.data
        return y

    def backward(self, dy):
        x = self._x
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.W.grad += x2.T @ dy2
        if self.b is not None:
            self.b.grad += dy2.sum(axis=0)
        return dy @ self.W.data.T


class LayerNorm(Module):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""

    def __init__(self, d, eps=1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * self.gamma.data + self.beta.data

    def backward(self, dy):
        xhat, inv = self._cache
        d = xhat.shape[-1]
        self.gamma.grad += np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
        self.beta.grad += np.sum(dy, axis=tuple(range(dy.ndim - 1)))
        dxhat = dy * self.gamma.data
        # standard layernorm input gradient
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


class Gelu(Module):
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return gelu(x)

    def backward(self, dy):
        return dy * gelu_grad(self._x)


class MultiHeadSelfAttention(Module):
    """Standard scaled dot-product self-attention over (B, N, D) sequences."""

    def __init__(self, d_model, n_heads, rng, std=0.02):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.scale = self.d_head ** -0.5
        self.wq = Linear(d_model, d_model, rng, std)
        self.wk = Linear(d_model, d_model, rng, std)
        self.wv = Linear(d_model, d_model, rng, std)
        self.wo = Linear(d_model, d_model, rng, std)
        self._cache = None

    def _split(self, x):
        B, N, _ = x.shape
        return x.reshape(B, N, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, h, N, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, N, h * dh)

    def forward(self, x):
        q = self._split(self.wq.forward(x))
        k = self._split(self.wk.forward(x))
        v = self._split(self.wv.forward(x))
        att = softmax(q @ k.swapaxes(-1, -2) * self.scale)
        y = att @ v
        self._cache = (q, k, v, att)
        return self.wo.forward(self._merge(y))

    def backward(self, dy):
        q, k, v, att = self._cache
        dmerged = self.wo.backward(dy)
        dyh = self._split(dmerged)
        datt = dyh @ v.swapaxes(-1, -2)
        dv = att.swapaxes(-1, -2) @ dyh
        ds = softmax_backward(att, datt) * self.scale
        dq = ds @ k
        dk = ds.swapaxes(-1, -2) @ q
        dx = self.wq.backward(self._merge(dq))
        dx += self.wk.backward(self._merge(dk))
        dx += self.wv.backward(self._merge(dv))
        return dx


class Mlp(Module):
    def __init__(self, d_model, hidden, rng, std=0.02):
        self.fc1 = Linear(d_model, hidden, rng, std)
        self.act = Gelu()
        self.fc2 = Linear(hidden, d_model, rng, std)

    def forward(self, x):
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(ln1(x)), then x + mlp(ln2(x))."""

    def __init__(self, d_model, n_heads, mlp_ratio, rng, std=0.02):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, n_heads, rng, std)
        self.ln2 = LayerNorm(d_model)
        self.mlp = Mlp(d_model, int(d_model * mlp_ratio), rng, std)

    def forward(self, x):
        x = x + self.attn.forward(self.ln1.forward(x))
        x = x + self.mlp.forward(self.ln2.forward(x))
        return x

    def backward(self, dy):
        dy = dy + self.ln2.backward(self.mlp.backward(dy))
        dy = dy + self.ln1.backward(self.attn.backward(dy))
        return dy


class Conv2dSame(Module):
    """2-D convolution with odd kernel and 'same' zero padding on (B, C, H, W)."""

    def __init__(self, c_in, c_out, kernel, rng, std=0.02):
        if kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.W = Parameter(rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)))
        self.b = Parameter(np.zeros(c_out))
        self._xp = None

    def forward(self, x):
        k = self.kernel
        pad = k // 2
        B, C, H, Wd = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        self._xp = xp
        acc = np.zeros((B, H, Wd, self.W.shape[0]))
        for i in range(k):
            for j in range(k):
                # (B,C,H,W) x (O,C) -> (B,H,W,O)
                acc += np.tensordot(xp[:, :, i:i + H, j:j + Wd], self.W.data[:, :, i, j], axes=([1], [1]))
        return acc.transpose(0, 3, 1, 2) + self.b.data[None, :, None, None]

    def backward(self, dy):
        k = self.kernel
        xp = self._xp
        B, C, Hp, Wp = xp.shape
        H, Wd = dy.shape[2], dy.shape[3]
        dacc = dy.transpose(0, 2, 3, 1)  # (B,H,W,O)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                sl = xp[:, :, i:i + H, j:j + Wd]
                self.W.grad[:, :, i, j] += np.tensordot(dacc, sl, axes=([0, 1, 2], [0, 2, 3]))
                dxp[:, :, i:i + H, j:j + Wd] += np.tensordot(dacc, self.W.data[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        self.b.grad += dacc.sum(axis=(0, 1, 2))
        pad = k // 2
        return dxp[:, :, pad:Hp - pad, pad:Wp - pad]


class AttentionPool(Module):
    """Learnable-query attention pooling of a set: (B, N, D) -> (B, D).

    Scores are q.x_i / sqrt(D); the output is the softmax-weighted sum of the
    inputs themselves, i.e. a convex combination of the rows.
    """

    def __init__(self, d, rng, std=0.02):
        self.q = Parameter(rng.normal(0.0, std, size=d))
        self._cache = None

    def forward(self, x):
        d = x.shape[-1]
        scale = 1.0 / np.sqrt(d)
        s = x @ self.q.data * scale
        a = softmax(s, axis=-1)
        self._cache = (x, a, scale)
        return np.einsum("bn,bnd->bd", a, x)

    def backward(self, dy):
        x, a, scale = self._cache
        da = np.einsum("bd,bnd->bn", dy, x)
        dx = a[:, :, None] * dy[:, None, :]
        ds = softmax_backward(a, da) * scale
        dx += ds[:, :, None] * self.q.data[None, None, :]
        self.q.grad += np.einsum("bn,bnd->d", ds, x)
        return dx
