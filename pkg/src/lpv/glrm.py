"""Global Linguistic Reconstruction Module.

The previous stage's attention map is thresholded into per-character pixel
sets. Two pixels that belong to the same character's set may not attend to
each other, so every character's features are rebuilt from the other
characters' context (the residual path keeps the original local features).
"""

from __future__ import annotations

import numpy as np

from .nn import ConfigError, EncoderBlock, Module, ModuleList
from .tensor import NEG_INF, ContractError, Tensor

DEFAULT_THRESHOLD = 0.05


def generate_parallel_mask(a, t=DEFAULT_THRESHOLD):
    """Additive pixel-pair mask from an attention map.

    ``a`` has shape (T, P) or (B, T, P); returns (P, P) or (B, P, P) with
    entries in {0, NEG_INF}. Pixels ``i`` and ``j`` are masked when some
    character has both at or above ``t``. A row that would be fully masked
    is reset to zeros, and so is the matching column to keep M symmetric.
    """
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    if (a < 0).any():
        raise ContractError("attention map has negative entries")
    on = (a - t >= 0).astype(np.float64)
    co = np.swapaxes(on, -1, -2) @ on
    masked = co > 0
    full = masked.all(axis=-1)
    masked &= ~full[..., :, None]
    masked &= ~full[..., None, :]
    return np.where(masked, NEG_INF, 0.0).astype(a.dtype if a.dtype.kind == "f" else np.float64)


def brute_force_mask(a, t=DEFAULT_THRESHOLD):
    """Reference triple loop over (pixel i, pixel j, character k), with row/column rescue."""
    a = np.asarray(a)
    n_chars, n_pix = a.shape
    m = np.zeros((n_pix, n_pix))
    for i in range(n_pix):
        for j in range(n_pix):
            for k in range(n_chars):
                if a[k, i] - t >= 0 and a[k, j] - t >= 0:
                    m[i, j] = NEG_INF
                    break
    full = [i for i in range(n_pix) if all(m[i, j] == NEG_INF for j in range(n_pix))]
    for i in full:
        m[i, :] = 0.0
        m[:, i] = 0.0
    return m


class GLRM(Module):
    def __init__(self, e, layers, heads, rng, dtype=np.float32):
        super().__init__()
        if layers < 1:
            raise ConfigError(f"GLRM needs at least one layer, got {layers}")
        self.block = ModuleList(EncoderBlock(e, heads, rng, dtype) for _ in range(layers))

    def forward(self, f_prev, a_prev, mask_enabled=True, t=DEFAULT_THRESHOLD, mask=None,
                attn_sink=None):
        """Encode ``f_prev`` (B, P, E) under the mask built from ``a_prev`` (B, T, P).

        A precomputed ``mask`` overrides generation (used to freeze it).
        Per-block attention arrays are appended to ``attn_sink`` if given.
        Returns the new feature tokens and the mask that was applied (or None).
        """
        if not mask_enabled:
            mask = None
        elif mask is None:
            mask = generate_parallel_mask(a_prev, t)
        x = f_prev
        for blk in self.block:
            x = blk(x, mask, attn_sink)
        return x, mask


def glrm_forward(f_prev, a_prev, mask_enabled, params, t=DEFAULT_THRESHOLD):
    return params(f_prev, a_prev, mask_enabled, t)[0]
