"""Deterministic synthetic word images rendered from a built-in 5x7 bitmap font."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .model import Charset
from .tensor import Rng

_GLYPH_ROWS = {
    "a": [".....", ".....", ".###.", "....#", ".####", "#...#", ".####"],
    "d": ["....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"],
    "e": [".....", ".....", ".###.", "#...#", "#####", "#....", ".###."],
    "g": [".....", ".####", "#...#", "#...#", ".####", "....#", ".###."],
    "i": ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."],
    "l": [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "m": [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"],
    "n": [".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"],
    "o": [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."],
    "r": [".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."],
    "s": [".....", ".....", ".####", "#....", ".###.", "....#", "####."],
    "t": ["..#..", "..#..", "#####", "..#..", "..#..", "..#.#", "...#."],
}

GLYPHS = {
    ch: np.array([[c == "#" for c in row] for row in rows], dtype=np.float32)
    for ch, rows in _GLYPH_ROWS.items()
}

# 50 words over the 12 symbols. Many share subwords (ing, ter, ast, ion, ...);
# same-length words differ in at least two positions and no word is a prefix
# of another, so one hidden character is recoverable from the rest.
VOCAB = (
    "string", "sting", "doing", "timing", "dining", "rising", "aiding", "lion",
    "motion", "ration", "omen", "tern", "terms", "otter", "aster", "later",
    "tamer", "more", "store", "adore", "tent", "mental", "last", "least",
    "roast", "steal", "tiger", "older", "tide", "dime", "meal", "dream",
    "team", "long", "along", "gold", "trim", "slim", "ideal", "garden",
    "linger", "ended", "mended", "tender", "rest", "train", "stain", "modern",
    "tidal", "medal",
)

SPLIT_IDS = {"train": 0, "test": 1}


@dataclass
class RenderConfig:
    img_h: int = 16
    img_w: int = 48
    min_scale: float = 1.0
    max_scale: float = 1.25
    noise: float = 0.1
    jitter: int = 1  # max extra pixels of spacing / vertical offset


@dataclass
class Sample:
    image: np.ndarray  # (img_h, img_w, 1), values in [0, 1]
    text: str
    label: np.ndarray  # (T,) class ids
    occluded_index: int | None = None
    boxes: list = field(default_factory=list)  # (y0, x0, y1, x1) per character


def _resize_nearest(glyph, h, w):
    rows = (np.arange(h) * glyph.shape[0] // h)
    cols = (np.arange(w) * glyph.shape[1] // w)
    return glyph[rows][:, cols]


def render_word(text, cfg: RenderConfig, rng: Rng, charset: Charset | None = None, t_max=8):
    if not text:
        raise ValueError("cannot render empty text")
    for ch in text:
        if ch not in GLYPHS:
            raise ValueError(f"no glyph for symbol {ch!r}")
    charset = charset or Charset()
    s = rng.uniform(cfg.min_scale, cfg.max_scale)
    gh = max(1, int(np.floor(7 * s + 0.5)))
    gw = max(1, int(np.floor(5 * s + 0.5)))
    gaps = [1 + (int(rng.integers(0, cfg.jitter + 1)) if cfg.jitter else 0)
            for _ in range(len(text) - 1)]
    width = gw * len(text) + sum(gaps)
    if width > cfg.img_w or gh > cfg.img_h:
        raise ValueError(f"text {text!r} needs {width}x{gh} px, canvas is {cfg.img_w}x{cfg.img_h}")

    # Left-aligned with a small start jitter so slot k sits roughly at a fixed column.
    x = min(int(rng.integers(0, cfg.jitter + 1)) if cfg.jitter else 0, cfg.img_w - width)
    base_y = (cfg.img_h - gh) // 2
    img = np.zeros((cfg.img_h, cfg.img_w), dtype=np.float32)
    boxes = []
    for k, ch in enumerate(text):
        dy = int(rng.integers(-cfg.jitter, cfg.jitter + 1)) if cfg.jitter else 0
        y = min(max(base_y + dy, 0), cfg.img_h - gh)
        img[y:y + gh, x:x + gw] = np.maximum(img[y:y + gh, x:x + gw],
                                            _resize_nearest(GLYPHS[ch], gh, gw))
        boxes.append((y, x, y + gh, x + gw))
        if k < len(gaps):
            x += gw + gaps[k]
    if cfg.noise:
        img += rng.uniform(-cfg.noise, cfg.noise, img.shape).astype(np.float32)
        np.clip(img, 0.0, 1.0, out=img)
    return Sample(image=img[:, :, None], text=text, label=charset.encode(text, t_max), boxes=boxes)


def corrupt_occlude(sample: Sample, rng: Rng, index=None, background=0.0):
    """Blank one character's bounding box; the label is left unchanged."""
    if index is None:
        index = int(rng.integers(0, len(sample.text)))
    if not 0 <= index < len(sample.text):
        raise IndexError(f"occlusion index {index} outside text {sample.text!r}")
    img = sample.image.copy()
    y0, x0, y1, x1 = sample.boxes[index]
    img[y0:y1, x0:x1, :] = background
    return replace(sample, image=img, occluded_index=index)


def make_dataset(vocab, n_samples, split, seed, cfg: RenderConfig | None = None,
                 charset: Charset | None = None, t_max=8):
    """Words drawn uniformly with replacement; each split uses its own seed stream."""
    vocab = list(vocab)
    if not vocab:
        raise ValueError("vocabulary is empty")
    charset = charset or Charset()
    for w in vocab:
        bad = [c for c in w if c not in charset.symbols]
        if bad:
            raise ValueError(f"word {w!r} uses symbols outside the charset: {bad}")
    cfg = cfg or RenderConfig()
    split_id = SPLIT_IDS.get(split)
    if split_id is None:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLIT_IDS)}")
    root = Rng(np.random.SeedSequence([int(seed), split_id]).generate_state(1, np.uint64)[0])
    words = root.integers(0, len(vocab), n_samples)
    return [render_word(vocab[int(w)], cfg, root.spawn(i), charset, t_max)
            for i, w in enumerate(words)]


def occlude_dataset(samples, seed):
    """Occlude one random character of every sample (deterministic per seed)."""
    root = Rng(np.random.SeedSequence([int(seed), 99]).generate_state(1, np.uint64)[0])
    return [corrupt_occlude(s, root.spawn(i)) for i, s in enumerate(samples)]


def stack_batch(samples):
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples])
    return images, labels


# -- PGM export --------------------------------------------------------------------
def to_u8(arr):
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, gray_u8):
    gray_u8 = np.asarray(gray_u8, dtype=np.uint8)
    h, w = gray_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray_u8.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = raw[len(raw) - w * h:]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def dump_dataset(samples, out_dir):
    """One PGM per image plus ``index.tsv`` with ``id<TAB>text<TAB>occluded_index``."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = f"{i:06d}"
        write_pgm(os.path.join(out_dir, name + ".pgm"), to_u8(s.image[:, :, 0]))
        occ = "" if s.occluded_index is None else str(s.occluded_index)
        lines.append(f"{name}\t{s.text}\t{occ}\n")
    with open(os.path.join(out_dir, "index.tsv"), "w", encoding="utf-8") as fh:
        fh.writelines(lines)
