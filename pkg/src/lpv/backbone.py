"""Image -> quarter-resolution token features.

Two stride-2 3x3 convolutions, each followed by a stride-1 3x3 convolution,
bring the image to (H/4, W/4). The grid is flattened, tagged with a 2-D
sinusoidal position encoding and mixed by a few transformer encoder blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConfigError, Conv2d, EncoderBlock, LayerNorm, Module, ModuleList, sinusoidal_pe_2d
from .tensor import ShapeError, Tensor, gelu


@dataclass
class BackboneConfig:
    img_h: int = 16
    img_w: int = 48
    e: int = 32
    n_mix_blocks: int = 2
    channels: int = 1
    heads: int = 4

    def validate(self, unet_grid=True):
        """``unet_grid`` additionally requires a token grid the key U-Net accepts."""
        m = 16 if unet_grid else 4
        if self.img_h % m or self.img_w % m or self.img_h <= 0 or self.img_w <= 0:
            raise ConfigError(
                f"image size {self.img_h}x{self.img_w} must be a positive multiple of {m}")
        if self.e % 4:
            raise ConfigError(f"channel width {self.e} must be divisible by 4")
        if self.n_mix_blocks < 0 or self.channels < 1:
            raise ConfigError("n_mix_blocks must be >= 0 and channels >= 1")

    @property
    def grid(self):
        return self.img_h // 4, self.img_w // 4

    @property
    def n_tokens(self):
        return (self.img_h * self.img_w) // 16


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32, padding_mode="zeros"):
        super().__init__()
        cfg.validate(unet_grid=False)
        self.cfg = cfg
        self.stem1 = Conv2d(cfg.channels, cfg.e, 3, rng, stride=2,
                            padding_mode=padding_mode, dtype=dtype)
        self.stem1b = Conv2d(cfg.e, cfg.e, 3, rng, padding_mode=padding_mode, dtype=dtype)
        self.stem2 = Conv2d(cfg.e, cfg.e, 3, rng, stride=2,
                            padding_mode=padding_mode, dtype=dtype)
        self.stem2b = Conv2d(cfg.e, cfg.e, 3, rng, padding_mode=padding_mode, dtype=dtype)
        self.mix = ModuleList(EncoderBlock(cfg.e, cfg.heads, rng, dtype)
                              for _ in range(cfg.n_mix_blocks))
        self.norm = LayerNorm(cfg.e, dtype)
        gh, gw = cfg.grid
        self.pe = sinusoidal_pe_2d(gh, gw, cfg.e, dtype=dtype)

    def stem(self, img):
        """Local feature extraction: (B, H, W, chan) -> (B, H/4, W/4, E)."""
        x = gelu(self.stem1b(gelu(self.stem1(img))))
        return gelu(self.stem2b(gelu(self.stem2(x))))

    def forward(self, img):
        """Returns the feature map as tokens, shape (B, H/4 * W/4, E)."""
        cfg = self.cfg
        if img.ndim == 3:
            img = img.reshape(1, *img.shape)
        if tuple(img.shape[1:]) != (cfg.img_h, cfg.img_w, cfg.channels):
            raise ShapeError(
                f"backbone expects images {(cfg.img_h, cfg.img_w, cfg.channels)}, "
                f"got {tuple(img.shape[1:])}")
        f = self.stem(img)
        b, gh, gw, e = f.shape
        x = f.reshape(b, gh * gw, e) + Tensor(self.pe.astype(f.dtype, copy=False))
        for blk in self.mix:
            x = blk(x)
        return self.norm(x)


def backbone_forward(backbone, img):
    return backbone(img)
