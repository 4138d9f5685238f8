"""Training loop with the two-phase mask schedule, and evaluation."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .model import LpvModel, compute_loss, predict_ids, stage_losses
from .optim import Adam
from .synthdata import stack_batch
from .tensor import Rng

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "stage", "loss", "seq_acc", "char_acc")
MASK_MODES = ("on", "off", "schedule")


class NumericalError(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class StageMetrics:
    loss: float
    seq_acc: float
    char_acc: float


def mask_enabled_at(epoch, mode, mask_on_epoch):
    if mode == "on":
        return True
    if mode == "off":
        return False
    if mode == "schedule":
        return epoch >= mask_on_epoch
    raise ValueError(f"mask mode must be one of {MASK_MODES}, got {mode!r}")


def lr_at(epoch, cfg):
    s = cfg.schedule
    return cfg.optimizer.lr if epoch < s.lr_decay_epoch else s.decayed_lr


def _accuracy_counts(ids, labels, pad):
    """(exact-sequence hits, correct non-PAD positions, non-PAD positions)."""
    keep = labels != pad
    hit = (ids == labels) | ~keep
    return int(hit.all(axis=-1).sum()), int(((ids == labels) & keep).sum()), int(keep.sum())


class _Tally:
    def __init__(self, n_stages):
        self.loss = np.zeros(n_stages)
        self.seq = np.zeros(n_stages, dtype=np.int64)
        self.chars = np.zeros(n_stages, dtype=np.int64)
        self.char_total = np.zeros(n_stages, dtype=np.int64)
        self.n = 0

    def add(self, trace, labels, losses, pad):
        b = len(labels)
        for i, y in enumerate(trace.logits):
            s, c, t = _accuracy_counts(predict_ids(y), labels, pad)
            self.loss[i] += float(losses[i]) * b
            self.seq[i] += s
            self.chars[i] += c
            self.char_total[i] += t
        self.n += b

    def merge(self, other):
        self.loss += other.loss
        self.seq += other.seq
        self.chars += other.chars
        self.char_total += other.char_total
        self.n += other.n

    def result(self):
        n = max(self.n, 1)
        return [StageMetrics(self.loss[i] / n, self.seq[i] / n,
                             self.chars[i] / max(self.char_total[i], 1))
                for i in range(len(self.loss))]


def train(cfg, train_set, out_dir=None, mask_mode="schedule", model=None, progress=None):
    """Train an LPV model; returns ``(model, metrics_rows)``.

    One metrics row per epoch and stage, measured on the training batches of
    that epoch. With ``out_dir`` the rows go to ``metrics.csv`` and the final
    weights to ``model.lpv``.
    """
    if not train_set:
        raise ValueError("training set is empty")
    cfg.validate()
    if mask_mode not in MASK_MODES:
        raise ValueError(f"mask mode must be one of {MASK_MODES}, got {mask_mode!r}")
    model = model or LpvModel(cfg)
    opt = Adam(model.named_parameters(), lr=cfg.optimizer.lr,
               betas=(cfg.optimizer.beta1, cfg.optimizer.beta2), eps=cfg.optimizer.eps)
    images, labels = stack_batch(train_set)
    images = images.astype(cfg.np_dtype)
    order_rng = Rng(cfg.seed).spawn(1000)
    bs = cfg.schedule.batch_size
    pad = model.charset.pad
    rows = []

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        fh = open(metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    try:
        for epoch in range(cfg.schedule.total_epochs):
            opt.lr = lr_at(epoch, cfg)
            masked = mask_enabled_at(epoch, mask_mode, cfg.schedule.mask_on_epoch)
            perm = order_rng.permutation(len(train_set))
            tally = _Tally(cfg.n_stages)
            for start in range(0, len(perm), bs):
                idx = perm[start:start + bs]
                trace = model(images[idx], mask_enabled=masked)
                losses = stage_losses(trace, labels[idx])
                loss = compute_loss(trace, labels[idx]) if len(losses) > 1 else losses[0]
                if not np.isfinite(loss.data):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {start // bs}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                tally.add(trace, labels[idx], [ell.data for ell in losses], pad)
            for stage, m in enumerate(tally.result()):
                row = (epoch, stage, round(float(m.loss), 6), round(float(m.seq_acc), 6),
                       round(float(m.char_acc), 6))
                rows.append(row)
                if out_dir:
                    writer.writerow(row)
            final = tally.result()[-1]
            log.info("epoch %d lr %.1e mask %s loss %.4f seq %.3f", epoch, opt.lr,
                     "on" if masked else "off", final.loss, final.seq_acc)
            if progress:
                progress(epoch, tally.result())
    finally:
        if out_dir:
            fh.close()
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "model.lpv"))
    return model, rows


def _eval_shard(model, images, labels, bs, mask_enabled):
    tally = _Tally(model.cfg.n_stages)
    preds = [[] for _ in range(model.cfg.n_stages)]
    for start in range(0, len(images), bs):
        x, y = images[start:start + bs], labels[start:start + bs]
        trace = model(x, mask_enabled=mask_enabled)
        losses = [ell.data for ell in stage_losses(trace, y)]
        tally.add(trace, y, losses, model.charset.pad)
        for i, logits in enumerate(trace.logits):
            preds[i].append(predict_ids(logits))
    return tally, preds


def evaluate(model, samples, mask_enabled=True, batch_size=64, workers=1):
    """Per-stage metrics and predicted texts.

    With ``workers > 1`` the samples are split into contiguous shards scored on
    threads; shard results are merged in shard order, so the output does not
    depend on scheduling.
    """
    images, labels = stack_batch(samples)
    images = images.astype(model.cfg.np_dtype)
    shards = np.array_split(np.arange(len(samples)), max(1, workers))
    shards = [s for s in shards if len(s)]
    if len(shards) > 1:
        with ThreadPoolExecutor(len(shards)) as ex:
            parts = list(ex.map(lambda s: _eval_shard(model, images[s], labels[s],
                                                      batch_size, mask_enabled), shards))
    else:
        parts = [_eval_shard(model, images, labels, batch_size, mask_enabled)]
    tally = _Tally(model.cfg.n_stages)
    texts = [[] for _ in range(model.cfg.n_stages)]
    for part_tally, preds in parts:
        tally.merge(part_tally)
        for i, chunks in enumerate(preds):
            for ids in chunks:
                texts[i].extend(model.charset.decode_ids(r) for r in ids)
    return tally.result(), texts
