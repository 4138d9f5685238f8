"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``analyze`` (query similarity), ``dump-attn``
(per-stage attention maps) and ``dump-data`` (dataset as PGM files).

Exit codes: 0 success, 1 usage or config error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import analysis
from .backbone import BackboneConfig
from .checkpoint import CheckpointError, load_checkpoint
from .model import AdamConfig, LpvConfig, LpvModel, Schedule
from .nn import ConfigError
from .synthdata import VOCAB, dump_dataset, make_dataset, occlude_dataset, write_pgm
from .train import MASK_MODES, NumericalError, evaluate, train

log = logging.getLogger("lpv")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "config.cfg"
CHECKPOINT_NAME = "model.lpv"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 1
    stages: int = 3
    glrm_layers: int = 2
    mask: str = "schedule"
    epochs: int = 16
    mask_on_epoch: int | None = None  # derived from epochs when unset
    lr_decay_epoch: int | None = None  # derived from epochs when unset
    lr: float = 1e-3
    decayed_lr: float = 1e-4
    batch_size: int = 32
    t: float = 0.05
    t_max: int = 8
    img_h: int = 16
    img_w: int = 48
    e: int = 32
    heads: int = 4
    mix_blocks: int = 2
    n_train: int = 5000
    n_test: int = 500
    workers: int = 1

    def resolved_mask_on_epoch(self):
        return self.epochs // 2 if self.mask_on_epoch is None else self.mask_on_epoch

    def resolved_lr_decay_epoch(self):
        if self.lr_decay_epoch is None:
            return int(round(self.epochs * 10 / 16))
        return self.lr_decay_epoch

    def to_model_config(self):
        cfg = LpvConfig(
            n_stages=self.stages, glrm_layers=self.glrm_layers, t=self.t, t_max=self.t_max,
            backbone=BackboneConfig(img_h=self.img_h, img_w=self.img_w, e=self.e,
                                    n_mix_blocks=self.mix_blocks, heads=self.heads),
            optimizer=AdamConfig(lr=self.lr),
            schedule=Schedule(total_epochs=self.epochs,
                              mask_on_epoch=self.resolved_mask_on_epoch(),
                              lr_decay_epoch=self.resolved_lr_decay_epoch(),
                              decayed_lr=self.decayed_lr, batch_size=self.batch_size),
            seed=self.seed)
        cfg.validate()
        return cfg

    def dumps(self):
        lines = ["# resolved run configuration"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "mask_on_epoch":
                v = self.resolved_mask_on_epoch()
            elif f.name == "lr_decay_epoch":
                v = self.resolved_lr_decay_epoch()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_INT_KEYS = {n for n, f in _FIELDS.items() if "int" in str(f.type)}
_FLOAT_KEYS = {n for n, f in _FIELDS.items() if "float" in str(f.type)}


def _coerce(key, raw):
    key = key.strip().replace("-", "_")
    if key not in _FIELDS:
        raise UsageError(f"unknown config key {key!r}")
    raw = raw.strip() if isinstance(raw, str) else raw
    try:
        if key in _INT_KEYS:
            value = int(raw)
        elif key in _FLOAT_KEYS:
            value = float(raw)
        else:
            value = str(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None
    if key == "mask" and value not in MASK_MODES:
        raise UsageError(f"mask must be one of {MASK_MODES}, got {value!r}")
    return key, value


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        try:
            key, value = _coerce(k, v)
        except UsageError as exc:
            raise UsageError(f"{source}:{lineno}: {exc}") from None
        values[key] = value
    return values


def load_config_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), path)


_FLAG_KEYS = ("seed", "stages", "glrm_layers", "mask", "epochs", "lr")


def resolve_config(args, fallback_config=None):
    """Built-in defaults, then the config file, then explicit flags."""
    values = {}
    path = args.config or fallback_config
    if path:
        values.update(load_config_file(path))
    for key in _FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(**values)


# -- argument parsing ----------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--stages", type=int, help="number of cascade stages N")
    p.add_argument("--glrm-layers", dest="glrm_layers", type=int)
    p.add_argument("--mask", choices=MASK_MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint", help="model checkpoint (defaults to OUT/model.lpv)")
    p.add_argument("--split", choices=("clean", "occluded"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="lpv", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("train", help="train a model; writes model.lpv and metrics.csv")
    _common(p)
    p = sub.add_parser("eval", help="per-stage accuracy on the test splits")
    _common(p)
    p.add_argument("--csv", help="also write the metrics to this CSV file")
    p = sub.add_parser("analyze", help="query Gram matrices per stage and text length")
    _common(p)
    p = sub.add_parser("dump-attn", help="per-stage, per-slot attention maps as PGM")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="test sample index")
    p = sub.add_parser("dump-data", help="write the test split as PGM files")
    _common(p)
    return parser


# -- helpers ------------------------------------------------------------------------
def _test_split(rc, split):
    samples = make_dataset(VOCAB, rc.n_test, "test", rc.seed, t_max=rc.t_max)
    if split == "occluded":
        samples = occlude_dataset(samples, rc.seed)
    return samples


def _splits(args):
    return [args.split] if args.split else ["clean", "occluded"]


def _require_out(args):
    if not args.out:
        raise UsageError(f"{args.command} needs --out DIR")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_model(args):
    ckpt = args.checkpoint or (os.path.join(args.out, CHECKPOINT_NAME) if args.out else None)
    if not ckpt:
        raise UsageError(f"{args.command} needs --checkpoint PATH or --out DIR")
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    sidecar = os.path.join(os.path.dirname(os.path.abspath(ckpt)), CONFIG_NAME)
    rc = resolve_config(args, sidecar if os.path.exists(sidecar) else None)
    model = LpvModel(rc.to_model_config())
    load_checkpoint(model, ckpt)
    return rc, model


def _fmt(m):
    return f"seq_acc={m.seq_acc:.4f} char_acc={m.char_acc:.4f} loss={m.loss:.4f}"


# -- commands -----------------------------------------------------------------------
def cmd_train(args):
    rc = resolve_config(args)
    cfg = rc.to_model_config()
    out = _require_out(args)
    with open(os.path.join(out, CONFIG_NAME), "w", encoding="utf-8") as fh:
        fh.write(rc.dumps())
    train_set = make_dataset(VOCAB, rc.n_train, "train", rc.seed, t_max=rc.t_max)
    model, rows = train(cfg, train_set, out_dir=out, mask_mode=rc.mask)
    last_epoch = rows[-1][0] if rows else None
    for epoch, stage, loss, seq, char in rows:
        if epoch == last_epoch:
            print(f"train stage {stage}: seq_acc={seq:.4f} char_acc={char:.4f} loss={loss:.4f}")
    print(f"wrote {os.path.join(out, CHECKPOINT_NAME)} and {os.path.join(out, 'metrics.csv')}")
    return EXIT_OK


def cmd_eval(args):
    rc, model = _load_model(args)
    rows = []
    for split in _splits(args):
        res, _ = evaluate(model, _test_split(rc, split), workers=rc.workers)
        for stage, m in enumerate(res):
            print(f"{split} stage {stage}: {_fmt(m)}")
            rows.append((split, stage, m.loss, m.seq_acc, m.char_acc))
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("split", "stage", "loss", "seq_acc", "char_acc"))
            w.writerows(rows)
    return EXIT_OK


def cmd_analyze(args):
    rc, model = _load_model(args)
    out = _require_out(args)
    split = args.split or "clean"
    samples = _test_split(rc, split)
    grams = analysis.collect_grams(model, samples)
    texts = [s.text for s in samples]
    for stage, g in enumerate(grams):
        frac = analysis.diagonal_max_fraction(g)
        spread = analysis.max_spread(g)
        print(f"{split} stage {stage}: diagonal-is-row-max fraction={frac:.4f} "
              f"max spread across images={spread:.3e}")
        for length, mean in analysis.grams_by_length(g, texts).items():
            stem = os.path.join(out, f"similarity_stage{stage}_len{length}")
            np.savetxt(stem + ".csv", mean, delimiter=",", fmt="%.8g")
            write_pgm(stem + ".pgm", analysis.heat_u8(mean, cell=8))
    return EXIT_OK


def cmd_dump_attention(args):
    rc, model = _load_model(args)
    out = _require_out(args)
    split = args.split or "clean"
    samples = _test_split(rc, split)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} outside test split of {len(samples)} samples")
    sample = samples[args.index]
    trace = model(sample.image[None].astype(model.cfg.np_dtype))
    maps = analysis.attention_maps(trace, model.cfg.backbone.grid)
    for stage, per_slot in enumerate(maps):
        for slot, m in enumerate(per_slot):
            peak = m.max()
            scaled = m / peak if peak > 0 else m
            write_pgm(os.path.join(out, f"attn_stage{stage}_slot{slot}.pgm"),
                      analysis.to_u8(scaled))
    write_pgm(os.path.join(out, "input.pgm"), analysis.to_u8(sample.image[:, :, 0]))
    with open(os.path.join(out, "predictions.txt"), "w", encoding="utf-8") as fh:
        occ = "" if sample.occluded_index is None else str(sample.occluded_index)
        fh.write(f"truth\t{sample.text}\t{occ}\n")
        for stage, logits in enumerate(trace.logits):
            text = model.charset.decode_ids(logits.data[0].argmax(axis=-1))
            fh.write(f"stage{stage}\t{text}\n")
            print(f"stage {stage}: {text!r} (truth {sample.text!r})")
    return EXIT_OK


def cmd_dump_data(args):
    rc = resolve_config(args)
    out = _require_out(args)
    samples = _test_split(rc, args.split or "clean")
    dump_dataset(samples, out)
    print(f"wrote {len(samples)} images to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "dump-attn": cmd_dump_attention,
    "dump-data": cmd_dump_data,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"lpv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError) as exc:
        print(f"lpv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"lpv: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
