"""Layers shared by the backbone, PAM and GLRM.

Feature maps are channels-last, ``(batch, H, W, C)``; token sequences are
``(batch, tokens, C)``. Parameters carry stable dotted names derived from
attribute names, e.g. ``glrm.0.block.1.ffn.w1.weight``.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    softmax_lastdim,
)


class ConfigError(ValueError):
    """Raised for invalid model hyper-parameters."""


class Module:
    """Minimal parameter container; registration order defines checkpoint order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.weight = param(rng.normal((n_in, n_out), std=1.0 / math.sqrt(n_in)), dtype)
        self.bias = param(np.zeros(n_out), dtype) if bias else None

    def forward(self, x):
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.scale = param(np.ones(dim), dtype)
        self.shift = param(np.zeros(dim), dtype)

    def forward(self, x):
        return layer_norm(x, self.scale, self.shift, self.eps)


# -- convolution ---------------------------------------------------------------------
def _pad_index(n, p, mode):
    idx = np.arange(-p, n + p)
    if mode == "circular":
        return idx % n
    return idx


def conv2d(x, weight, bias=None, stride=1, padding=0, padding_mode="zeros"):
    """2-D convolution over channels-last input.

    x: (B, H, W, Cin); weight: (kh, kw, Cin, Cout); returns (B, Ho, Wo, Cout).
    ``padding_mode`` is ``"zeros"`` or ``"circular"``.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[-1] != wd.shape[2]:
        raise ShapeError(f"conv2d: input {xd.shape} incompatible with kernel {wd.shape}")
    b, h, w, cin = xd.shape
    kh, kw, _, cout = wd.shape
    p, s = padding, stride
    if padding_mode == "circular" and p:
        ri, ci = _pad_index(h, p, "circular"), _pad_index(w, p, "circular")
        xp = xd[:, ri][:, :, ci]
    elif p:
        xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    else:
        xp = xd
    hp, wp = xp.shape[1:3]
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {xd.shape} too small for kernel {wd.shape}")

    cols = np.empty((b, ho, wo, kh, kw, cin), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
    k = kh * kw * cin
    cols2 = cols.reshape(-1, k)
    w2 = wd.reshape(k, cout)
    out = (cols2 @ w2).reshape(b, ho, wo, cout)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        dw = (cols2.T @ g2).reshape(wd.shape)
        dcols = (g2 @ w2.T).reshape(b, ho, wo, kh, kw, cin)
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
        if padding_mode == "circular" and p:
            dx = np.zeros(xd.shape, dtype=xd.dtype)
            tmp = np.zeros((b, h, wp, cin), dtype=xd.dtype)
            np.add.at(tmp, (slice(None), ri), dxp)
            np.add.at(dx, (slice(None), slice(None), ci), tmp)
        elif p:
            dx = dxp[:, p:p + h, p:p + w, :]
        else:
            dx = dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, bias=True,
                 padding_mode="zeros", dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.padding_mode = padding_mode
        fan_in = k * k * cin
        self.weight = param(rng.normal((k, k, cin, cout), std=math.sqrt(2.0 / fan_in)), dtype)
        self.bias = param(np.zeros(cout), dtype) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.padding_mode)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of (B, H, W, C)."""
    xd = x.data
    out = xd.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g):
        b, h2, w2, c = g.shape
        return (g.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)),)

    return Tensor._make(out, (x,), backward, "upsample2x")


class MiniUNet(Module):
    """Two stride-2 levels down, a bottleneck, two levels up with concat skips.

    Input and output are (B, H, W, E); H and W must be divisible by 4.
    """

    def __init__(self, e, rng, dtype=np.float32):
        super().__init__()
        self.down1 = Conv2d(e, e, 3, rng, stride=2, dtype=dtype)
        self.down2 = Conv2d(e, e, 3, rng, stride=2, dtype=dtype)
        self.mid = Conv2d(e, e, 3, rng, dtype=dtype)
        self.fuse1 = Conv2d(2 * e, e, 1, rng, dtype=dtype)
        # Output feeds attention keys; a shared key bias would get zero gradient.
        self.fuse2 = Conv2d(2 * e, e, 1, rng, bias=False, dtype=dtype)

    @staticmethod
    def check_grid(h, w):
        if h < 4 or w < 4 or h % 4 or w % 4:
            raise ConfigError(f"mini U-Net needs a feature grid divisible by 4, got {h}x{w}")

    def forward(self, f):
        self.check_grid(f.shape[1], f.shape[2])
        d1 = gelu(self.down1(f))
        d2 = gelu(self.down2(d1))
        mid = gelu(self.mid(d2))
        u1 = gelu(self.fuse1(concat([upsample2x(mid), d1], axis=-1)))
        return self.fuse2(concat([upsample2x(u1), f], axis=-1))


# -- attention -------------------------------------------------------------------------
class MultiHeadAttention(Module):
    def __init__(self, e, heads, rng, dtype=np.float32):
        super().__init__()
        if e % heads:
            raise ConfigError(f"width {e} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = e // heads
        self.wq = Linear(e, e, rng, dtype=dtype)
        # Key bias shifts every logit of a query row equally; softmax ignores it.
        self.wk = Linear(e, e, rng, bias=False, dtype=dtype)
        self.wv = Linear(e, e, rng, dtype=dtype)
        self.wo = Linear(e, e, rng, dtype=dtype)

    def _split(self, x):
        lead = x.shape[:-2]
        t = x.shape[-2]
        x = x.reshape(*lead, t, self.heads, self.head_dim)
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return x.transpose(axes)

    def forward(self, q_in, k_in, v_in, add_mask=None):
        """Returns ``(out, attn)`` with attn of shape (..., heads, Tq, Tk)."""
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(k_in))
        v = self._split(self.wv(v_in))
        nd = k.ndim
        kt = k.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
        scores = matmul(q, kt) * (1.0 / math.sqrt(self.head_dim))
        mask = None
        if add_mask is not None:
            m = add_mask.data if isinstance(add_mask, Tensor) else np.asarray(add_mask)
            mask = np.expand_dims(m, -3)  # broadcast over heads
        attn = softmax_lastdim(scores, mask)
        ctx = matmul(attn, v)
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        ctx = ctx.transpose(axes)
        ctx = ctx.reshape(*ctx.shape[:-2], self.heads * self.head_dim)
        return self.wo(ctx), attn


def mha_forward(mha, q, k, v, add_mask=None):
    return mha(q, k, v, add_mask)


class FeedForward(Module):
    def __init__(self, e, rng, hidden=None, dtype=np.float32):
        super().__init__()
        self.w1 = Linear(e, hidden or 4 * e, rng, dtype=dtype)
        self.w2 = Linear(hidden or 4 * e, e, rng, dtype=dtype)

    def forward(self, x):
        return self.w2(gelu(self.w1(x)))


class EncoderBlock(Module):
    """Pre-norm transformer encoder block with an optional additive attention mask."""

    def __init__(self, e, heads, rng, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(e, dtype)
        self.attn = MultiHeadAttention(e, heads, rng, dtype)
        self.ln2 = LayerNorm(e, dtype)
        self.ffn = FeedForward(e, rng, dtype=dtype)

    def forward(self, x, add_mask=None, attn_sink=None):
        h = self.ln1(x)
        a, attn = self.attn(h, h, h, add_mask)
        if attn_sink is not None:
            attn_sink.append(attn.data)
        x = x + a
        return x + self.ffn(self.ln2(x))


# -- position encodings ------------------------------------------------------------------
def sinusoidal_pe(t_max, e, dtype=np.float64):
    """Classic sinusoidal table of shape (t_max, e)."""
    if e % 2:
        raise ConfigError(f"sinusoidal encoding needs an even width, got {e}")
    pos = np.arange(t_max, dtype=np.float64)[:, None]
    two_k = np.arange(0, e, 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, two_k / e)
    pe = np.empty((t_max, e), dtype=np.float64)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe.astype(dtype)


def sinusoidal_pe_2d(h, w, e, dtype=np.float64):
    """(h*w, e) table: first e/2 channels encode the column, the rest the row."""
    if e % 4:
        raise ConfigError(f"2-D sinusoidal encoding needs width divisible by 4, got {e}")
    cols = sinusoidal_pe(w, e // 2)
    rows = sinusoidal_pe(h, e // 2)
    grid = np.concatenate([np.tile(cols, (h, 1)), np.repeat(rows, w, axis=0)], axis=1)
    return grid.astype(dtype)
