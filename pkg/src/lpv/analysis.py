"""Diagnostics over a trained cascade: query similarity and attention maps."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .synthdata import stack_batch, to_u8


def query_grams(trace):
    """Per stage, the (B, T, T) dot-product Gram matrix of that stage's queries.

    The stage-0 query has no batch axis; it is broadcast so every stage has
    the same layout.
    """
    batch = trace.logits[0].shape[0]
    out = []
    for q in trace.queries:
        q = np.asarray(q.data, dtype=np.float64)
        g = q @ np.swapaxes(q, -1, -2)
        if g.ndim == 2:
            g = np.broadcast_to(g, (batch,) + g.shape)
        out.append(np.array(g))
    return out


def collect_grams(model, samples, batch_size=64, mask_enabled=True):
    """Stage-wise Gram matrices for every sample: list over stages of (n, T, T)."""
    images, _ = stack_batch(samples)
    images = images.astype(model.cfg.np_dtype)
    per_stage = [[] for _ in range(model.cfg.n_stages)]
    for start in range(0, len(images), batch_size):
        trace = model(images[start:start + batch_size], mask_enabled=mask_enabled)
        for i, g in enumerate(query_grams(trace)):
            per_stage[i].append(g)
    return [np.concatenate(g) for g in per_stage]


def max_spread(grams):
    """Largest peak-to-peak range of any Gram entry across images.

    Zero exactly when every image yields the same matrix; unlike ``np.var``
    this has no rounding from forming a mean.
    """
    return float(np.ptp(np.asarray(grams), axis=0).max())


def grams_by_length(grams, texts):
    """Average (n, T, T) Gram matrices over samples grouped by text length."""
    groups = defaultdict(list)
    for g, text in zip(grams, texts):
        groups[len(text)].append(g)
    return {n: np.mean(gs, axis=0) for n, gs in sorted(groups.items())}


def diagonal_max_fraction(grams):
    """Fraction of rows (over all samples) whose diagonal entry is the row maximum."""
    grams = np.asarray(grams)
    diag = np.diagonal(grams, axis1=-2, axis2=-1)
    return float((diag >= grams.max(axis=-1)).mean())


def heat_u8(mat, cell=1):
    """Min-max scale to [0, 255]; a constant matrix maps to all zeros."""
    mat = np.asarray(mat, dtype=np.float64)
    lo, hi = mat.min(), mat.max()
    scaled = (mat - lo) / (hi - lo) if hi > lo else np.zeros_like(mat)
    img = to_u8(scaled)
    if cell > 1:
        img = np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)
    return img


def attention_maps(trace, grid, index=0):
    """Per stage, the (T, gh, gw) attention of batch element ``index``."""
    gh, gw = grid
    return [np.asarray(a.data[index], dtype=np.float64).reshape(-1, gh, gw)
            for a in trace.attn]
