"""The N-stage cascade: backbone, N PAMs, N-1 GLRMs, joint loss, decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig
from .glrm import DEFAULT_THRESHOLD, GLRM
from .nn import ConfigError, Module, ModuleList
from .pam import PAM, ZERO
from .tensor import Rng, Tensor, cross_entropy, scale

EOS = "[EOS]"
PAD = "[PAD]"
DEFAULT_SYMBOLS = tuple("adegilmnorst")


class Charset:
    """Ordered symbols followed by [EOS] and [PAD]."""

    def __init__(self, symbols=DEFAULT_SYMBOLS):
        symbols = tuple(symbols)
        if len(set(symbols)) != len(symbols):
            raise ConfigError("charset symbols must be unique")
        if EOS in symbols or PAD in symbols:
            raise ConfigError("charset symbols may not include [EOS]/[PAD]")
        self.symbols = symbols
        self.classes = symbols + (EOS, PAD)
        self.index = {s: i for i, s in enumerate(self.classes)}
        self.eos = len(symbols)
        self.pad = len(symbols) + 1

    def __len__(self):
        return len(self.classes)

    def encode(self, text, t_max):
        if len(text) > t_max - 1:
            raise ValueError(f"text {text!r} longer than {t_max - 1} symbols")
        try:
            ids = [self.index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in charset") from None
        return np.array(ids + [self.eos] + [self.pad] * (t_max - 1 - len(ids)), dtype=np.int64)

    def decode_ids(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos:
                break
            if i == self.pad:
                continue
            out.append(self.classes[i])
        return "".join(out)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Schedule:
    total_epochs: int = 16
    mask_on_epoch: int = 8
    lr_decay_epoch: int = 10
    decayed_lr: float = 1e-4
    batch_size: int = 32


@dataclass
class LpvConfig:
    n_stages: int = 3
    glrm_layers: int = 2
    t: float = DEFAULT_THRESHOLD
    t_max: int = 8
    symbols: tuple = DEFAULT_SYMBOLS
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 1
    dtype: str = "float32"

    def validate(self):
        if self.n_stages < 1:
            raise ConfigError(f"n_stages must be >= 1, got {self.n_stages}")
        if self.n_stages > 1 and self.glrm_layers < 1:
            raise ConfigError("glrm_layers must be >= 1")
        if self.t_max < 2:
            raise ConfigError("t_max must leave room for at least one symbol and [EOS]")
        if not 0.0 < self.t < 1.0:
            raise ConfigError(f"mask threshold must lie in (0, 1), got {self.t}")
        s = self.schedule
        if not 0 <= s.mask_on_epoch <= s.total_epochs:
            raise ConfigError("mask_on_epoch must lie in [0, total_epochs]")
        if s.batch_size < 1 or s.total_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and total_epochs >= 0")
        Charset(self.symbols)
        self.backbone.validate()
        if self.backbone.e % self.backbone.heads:
            raise ConfigError("width must be divisible by the head count")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class StageTrace:
    """Per-stage outputs of one forward pass (index 0 is the first stage)."""

    attn: list = field(default_factory=list)
    logits: list = field(default_factory=list)
    char_feats: list = field(default_factory=list)
    features: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    q_pri: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    glrm_attn: list = field(default_factory=list)  # per GLRM: one (B, h, P, P) array per block

    def __len__(self):
        return len(self.logits)


class LpvModel(Module):
    def __init__(self, cfg: LpvConfig):
        super().__init__()
        cfg.validate()
        object.__setattr__(self, "cfg", cfg)
        object.__setattr__(self, "charset", Charset(cfg.symbols))
        rng = Rng(cfg.seed)
        dt = cfg.np_dtype
        bb = cfg.backbone
        self.backbone = Backbone(bb, rng.spawn(0), dt)
        c = len(self.charset)
        self.pam = ModuleList(PAM(bb.e, cfg.t_max, c, rng.spawn(100 + i), dt)
                              for i in range(cfg.n_stages))
        self.glrm = ModuleList(GLRM(bb.e, cfg.glrm_layers, bb.heads, rng.spawn(200 + i), dt)
                               for i in range(cfg.n_stages - 1))

    def forward(self, img, mask_enabled=True, frozen_masks=None):
        """Run the cascade on images (B, H, W, chan); returns a StageTrace.

        ``frozen_masks`` (one per GLRM) replaces mask generation, so a
        gradient check can treat the masks as constants.
        """
        if not isinstance(img, Tensor):
            img = Tensor(np.asarray(img, dtype=self.cfg.np_dtype))
        grid = self.cfg.backbone.grid
        trace = StageTrace()
        f = self.backbone(img)
        prior = ZERO
        for i, pam in enumerate(self.pam):
            if i > 0:
                frozen = frozen_masks[i - 1] if frozen_masks is not None else None
                sink = []
                f, m = self.glrm[i - 1](f, trace.attn[i - 1], mask_enabled, self.cfg.t, frozen,
                                        sink)
                trace.masks.append(m)
                trace.glrm_attn.append(sink)
            out = pam(f, grid, prior)
            trace.features.append(f)
            trace.attn.append(out.attn)
            trace.char_feats.append(out.char_feats)
            trace.logits.append(out.logits)
            trace.queries.append(out.query)
            trace.q_pri.append(out.q_pri)
            prior = out.char_feats
        return trace


def lpv_forward(model, img, mask_enabled=True):
    return model(img, mask_enabled)


def stage_losses(trace, labels):
    """Per-stage mean cross-entropy over batch and all T positions."""
    labels = np.asarray(labels)
    return [cross_entropy(y, labels) for y in trace.logits]


def compute_loss(trace, labels):
    """Mean over stages of the per-stage position-averaged cross-entropy."""
    losses = stage_losses(trace, labels)
    total = losses[0]
    for ell in losses[1:]:
        total = total + ell
    return scale(total, 1.0 / len(losses))


def per_sample_loss(trace, labels):
    """Loss of each batch element, shape (B,)."""
    labels = np.asarray(labels)
    rows = [cross_entropy(y, labels, reduce=False).data.mean(axis=-1) for y in trace.logits]
    return np.mean(rows, axis=0)


def predict_ids(logits):
    """Greedy argmax; ``np.argmax`` returns the lowest index among ties."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=-1)


def decode_prediction(logits, charset):
    """Text for a (T, C) logits row block; stops at the first [EOS]."""
    return charset.decode_ids(predict_ids(logits))
