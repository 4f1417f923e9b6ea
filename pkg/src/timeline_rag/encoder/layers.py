"""Batched numpy layers with explicit forward/backward passes.

Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names; each
layer object only knows its prefix and shapes.  ``forward`` returns an output
and a cache, ``backward`` consumes the cache, accumulates parameter gradients
into a dict of the same layout and returns the input gradient.
"""

from __future__ import annotations

import math

import numpy as np

Params = dict  # name -> ndarray

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
NEG_INF = -1e30


def uniform_init(rng: np.random.Generator, shape, fan: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan)
    return rng.uniform(-bound, bound, size=shape)


def accumulate(grads: Params, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=np.float64, copy=True)


def gelu(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x, t):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner


def masked_softmax(s: np.ndarray, mask: np.ndarray | None, axis: int = -1) -> np.ndarray:
    if mask is not None:
        s = np.where(mask, s, NEG_INF)
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    if mask is not None:
        e = e * mask
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


class Linear:
    def __init__(self, prefix: str, d_in: int, d_out: int):
        self.prefix, self.d_in, self.d_out = prefix, d_in, d_out

    def init(self, rng) -> Params:
        return {
            f"{self.prefix}.w": uniform_init(rng, (self.d_in, self.d_out), self.d_in),
            f"{self.prefix}.b": uniform_init(rng, (self.d_out,), self.d_in),
        }

    def forward(self, p: Params, x):
        return x @ p[f"{self.prefix}.w"] + p[f"{self.prefix}.b"], x

    def backward(self, p: Params, x, dy, grads: Params):
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        accumulate(grads, f"{self.prefix}.w", x2.T @ dy2)
        accumulate(grads, f"{self.prefix}.b", dy2.sum(axis=0))
        return dy @ p[f"{self.prefix}.w"].T


class LayerNorm:
    def __init__(self, prefix: str, d: int):
        self.prefix, self.d = prefix, d

    def init(self, rng=None) -> Params:
        return {f"{self.prefix}.g": np.ones(self.d), f"{self.prefix}.b": np.zeros(self.d)}

    def forward(self, p: Params, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc**2).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + LN_EPS)
        xhat = xc * rstd
        return xhat * p[f"{self.prefix}.g"] + p[f"{self.prefix}.b"], (xhat, rstd)

    def backward(self, p: Params, cache, dy, grads: Params):
        xhat, rstd = cache
        accumulate(grads, f"{self.prefix}.g", (dy * xhat).reshape(-1, self.d).sum(axis=0))
        accumulate(grads, f"{self.prefix}.b", dy.reshape(-1, self.d).sum(axis=0))
        dxhat = dy * p[f"{self.prefix}.g"]
        return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(y):
    h = y.shape[-1] // 2
    return np.concatenate([y[..., h:], -y[..., :h]], axis=-1)


def rotary_tables(T: int, dh: int, base: float = 10000.0):
    half = dh // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.arange(T)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang), np.sin(ang)


class MultiHeadAttention:
    """Self-attention over (N, T, d) with a key-validity mask of shape (N, T)."""

    def __init__(self, prefix: str, d: int, heads: int, rotary: bool = False):
        if d % heads:
            raise ValueError(f"d={d} is not divisible by heads={heads}")
        if rotary and (d // heads) % 2:
            raise ValueError("rotary encoding needs an even head width")
        self.prefix, self.d, self.heads, self.rotary = prefix, d, heads, rotary
        self.dh = d // heads
        self.proj = {k: Linear(f"{prefix}.{k}", d, d) for k in ("q", "k", "v", "o")}

    def init(self, rng) -> Params:
        out = {}
        for k in ("q", "k", "v", "o"):
            out.update(self.proj[k].init(rng))
        return out

    def _split(self, x):
        N, T, _ = x.shape
        return x.reshape(N, T, self.heads, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, x):
        N, H, T, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(N, T, H * dh)

    def forward(self, p: Params, x, mask):
        q, _ = self.proj["q"].forward(p, x)
        k, _ = self.proj["k"].forward(p, x)
        v, _ = self.proj["v"].forward(p, x)
        q, k, v = self._split(q), self._split(k), self._split(v)
        rope = None
        if self.rotary:
            cos, sin = rotary_tables(x.shape[1], self.dh)
            rope = (cos, sin)
            q = q * cos + _rotate_half(q) * sin
            k = k * cos + _rotate_half(k) * sin
        scale = 1.0 / math.sqrt(self.dh)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        att = masked_softmax(s, mask[:, None, None, :])
        o = self._merge(att @ v)
        y, _ = self.proj["o"].forward(p, o)
        return y, (x, q, k, v, att, o, rope)

    def backward(self, p: Params, cache, dy, grads: Params):
        x, q, k, v, att, o, rope = cache
        scale = 1.0 / math.sqrt(self.dh)
        do = self.proj["o"].backward(p, o, dy, grads)
        do = self._split(do)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = softmax_backward(att, datt) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        if rope is not None:
            cos, sin = rope
            dq = dq * cos + _rotate_half_t(dq * sin)
            dk = dk * cos + _rotate_half_t(dk * sin)
        dx = self.proj["q"].backward(p, x, self._merge(dq), grads)
        dx = dx + self.proj["k"].backward(p, x, self._merge(dk), grads)
        dx = dx + self.proj["v"].backward(p, x, self._merge(dv), grads)
        return dx


class FeedForward:
    def __init__(self, prefix: str, d: int, hidden: int):
        self.l1 = Linear(f"{prefix}.ff1", d, hidden)
        self.l2 = Linear(f"{prefix}.ff2", hidden, d)

    def init(self, rng) -> Params:
        return {**self.l1.init(rng), **self.l2.init(rng)}

    def forward(self, p: Params, x):
        a, _ = self.l1.forward(p, x)
        h, t = gelu(a)
        y, _ = self.l2.forward(p, h)
        return y, (x, a, t, h)

    def backward(self, p: Params, cache, dy, grads: Params):
        x, a, t, h = cache
        dh = self.l2.backward(p, h, dy, grads)
        da = dh * gelu_grad(a, t)
        return self.l1.backward(p, x, da, grads)


class TransformerStack:
    """Pre-norm transformer blocks followed by a final layer norm."""

    def __init__(self, prefix: str, d: int, heads: int, layers: int, rotary: bool = False, ff_mult: int = 2):
        self.prefix = prefix
        self.blocks = []
        for i in range(layers):
            bp = f"{prefix}.l{i}"
            self.blocks.append(
                (
                    LayerNorm(f"{bp}.ln1", d),
                    MultiHeadAttention(f"{bp}.attn", d, heads, rotary),
                    LayerNorm(f"{bp}.ln2", d),
                    FeedForward(bp, d, ff_mult * d),
                )
            )
        self.ln_f = LayerNorm(f"{prefix}.lnf", d)

    def init(self, rng) -> Params:
        out = {}
        for ln1, attn, ln2, ff in self.blocks:
            out.update(ln1.init())
            out.update(attn.init(rng))
            out.update(ln2.init())
            out.update(ff.init(rng))
        out.update(self.ln_f.init())
        return out

    def forward(self, p: Params, x, mask):
        caches = []
        for ln1, attn, ln2, ff in self.blocks:
            a, c1 = ln1.forward(p, x)
            y, c2 = attn.forward(p, a, mask)
            x = x + y
            b, c3 = ln2.forward(p, x)
            f, c4 = ff.forward(p, b)
            x = x + f
            caches.append((c1, c2, c3, c4))
        out, cf = self.ln_f.forward(p, x)
        return out, (caches, cf)

    def backward(self, p: Params, cache, dy, grads: Params):
        caches, cf = cache
        dx = self.ln_f.backward(p, cf, dy, grads)
        for (ln1, attn, ln2, ff), (c1, c2, c3, c4) in zip(reversed(self.blocks), reversed(caches)):
            db = ff.backward(p, c4, dx, grads)
            dx = dx + ln2.backward(p, c3, db, grads)
            da = attn.backward(p, c2, dx, grads)
            dx = dx + ln1.backward(p, c1, da, grads)
        return dx
