"""Position Attention Module: per-character cross-attention over the feature grid.

Queries come from an encoding layer applied to ``prior + position encoding``;
the prior is zero at the first stage and the previous stage's character
features afterwards. Keys come from a mini U-Net over the feature map and
values are the feature tokens themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Linear, MiniUNet, Module, sinusoidal_pe
from .tensor import ShapeError, Tensor, matmul, softmax_lastdim

ZERO = None  # sentinel for the all-zero stage-0 prior


@dataclass
class PamOutput:
    attn: Tensor  # (B, T, P), rows sum to 1
    char_feats: Tensor  # (B, T, E)
    logits: Tensor  # (B, T, C), pre-softmax
    query: Tensor  # (T, E) at stage 0, else (B, T, E)
    q_pri: object  # ZERO or the prior tensor that was used


class PAM(Module):
    def __init__(self, e, t_max, n_classes, rng, dtype=np.float32, identity_keys=False):
        super().__init__()
        self.e = e
        self.t_max = t_max
        self.identity_keys = identity_keys
        if not identity_keys:
            self.key_net = MiniUNet(e, rng, dtype)
        self.encoding = Linear(e, e, rng, dtype=dtype)
        self.classifier = Linear(e, n_classes, rng, dtype=dtype)
        self.pe = sinusoidal_pe(t_max, e, dtype=dtype)

    def build_query(self, q_pri=ZERO):
        pe = Tensor(self.pe.astype(self.encoding.weight.dtype, copy=False))
        if q_pri is ZERO:
            return self.encoding(pe)
        if tuple(q_pri.shape[-2:]) != pe.shape:
            raise ShapeError(f"query prior {q_pri.shape} does not match (T, E) = {pe.shape}")
        return self.encoding(q_pri + pe)

    def keys(self, f, grid):
        if self.identity_keys:
            return f
        b, p, e = f.shape
        gh, gw = grid
        return self.key_net(f.reshape(b, gh, gw, e)).reshape(b, p, e)

    def forward(self, f, grid, q_pri=ZERO):
        gh, gw = grid
        if f.ndim != 3 or f.shape[1] != gh * gw or f.shape[2] != self.e:
            raise ShapeError(f"PAM expects features (B, {gh * gw}, {self.e}), got {f.shape}")
        q = self.build_query(q_pri)
        k = self.keys(f, grid)
        attn = spatial_attention(q, k, self.e)
        r = matmul(attn, f)
        return PamOutput(attn=attn, char_feats=r, logits=self.classifier(r), query=q, q_pri=q_pri)


def attention_logits(q, k, e):
    """Character-by-pixel logits, (K Q^T / sqrt(E)) transposed to (..., T, P)."""
    nd = k.ndim
    kt = k.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return matmul(q, kt) * (1.0 / math.sqrt(e))


def spatial_attention(q, k, e):
    """Each character row is normalized over the pixel axis."""
    return softmax_lastdim(attention_logits(q, k, e))


def pam_forward(f, q_pri, params, grid):
    return params(f, grid, q_pri)
