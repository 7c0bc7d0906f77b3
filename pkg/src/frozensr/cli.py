"""Command-line front end: ``frozensr {prepare,train,eval,infer,stitch,report,bench}``.

Run configuration files use a flat ``key = value`` grammar::

    # comments start with '#'; blank lines are ignored
    data_dir = runs/data        # paths are taken verbatim
    learning_rate = 1e-4        # ints, floats, true/false are typed by key
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data, imagecore, metrics, training
from .errors import ConfigError, DatasetError, FrozenSRError, ParameterError
from .model import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("frozensr")


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    data_dir: str
    out_dir: str
    checkpoint: str | None = None
    scale: int | None = None
    depth: int = 4
    base_channels: int = 32
    attention_enabled: bool = True
    zero_init_final: bool = True
    normalization: str = "none"
    batch_size: int = 2
    learning_rate: float = 3e-6
    epochs: int | None = None
    seed: int = 0
    wfe_alpha: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_interval: int = 50
    val_size: int = 8

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "model.ckpt"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            scale=self.scale,
            depth=self.depth,
            base_channels=self.base_channels,
            attention_enabled=self.attention_enabled,
            zero_init_final=self.zero_init_final,
            normalization=self.normalization,
        )

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            scale=self.scale,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=self.seed,
            wfe_alpha=self.wfe_alpha,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            val_interval=self.val_interval,
            val_size=self.val_size,
        )


_REQUIRED = ("data_dir", "out_dir")
_TYPES = {
    "data_dir": str,
    "out_dir": str,
    "checkpoint": str,
    "scale": int,
    "depth": int,
    "base_channels": int,
    "attention_enabled": bool,
    "zero_init_final": bool,
    "normalization": str,
    "batch_size": int,
    "learning_rate": float,
    "epochs": int,
    "seed": int,
    "wfe_alpha": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "val_interval": int,
    "val_size": int,
}
assert set(_TYPES) == {f.name for f in fields(RunConfig)}


def _convert(key: str, raw: str, lineno: int):
    kind = _TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        return kind(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind.__name__}, got {raw!r}") from None


def parse_run_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, lineno)
    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required path(s): {', '.join(missing)}")
    return RunConfig(**values)


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text)


# --------------------------------------------------------------------------
# helpers


def _dataset_scale(data_dir) -> int:
    meta = data.read_dataset_meta(data_dir)
    scale = int(meta["scale"])
    if scale not in (4, 8):
        raise ConfigError(f"dataset {data_dir} has scale x{scale}; only x4 and x8 are supported")
    return scale


def _load_eval_pairs(ckpt: Checkpoint, data_dir, split: str):
    scale = _dataset_scale(data_dir)
    if scale != ckpt.config.scale:
        raise ConfigError(f"checkpoint is x{ckpt.config.scale} but dataset {data_dir} is x{scale}")
    pairs, _ = data.load_dataset(data_dir, split=split)
    if not pairs:
        raise DatasetError(f"dataset {data_dir} has no '{split}' pairs")
    return pairs


def _caption(rec: metrics.MetricsRecord) -> str:
    return f"({rec.ssim!r}/{rec.psnr_db!r})"


def _short(rec: metrics.MetricsRecord) -> str:
    return f"({rec.ssim:.4f}/{rec.psnr_db:.2f})"


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    summary = data.prepare_dataset(
        args.src_dir,
        args.out_dir,
        scale=args.scale,
        size=args.size,
        stride=args.stride,
        split_fraction=args.split_fraction,
        seed=args.seed,
        split_by=args.split_by,
    )
    print(
        f"sources={summary.sources} skipped={summary.skipped} patches={summary.patches} "
        f"train={summary.train} test={summary.test}"
    )
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if not Path(rc.data_dir).is_dir():
        raise ConfigError(f"data_dir {rc.data_dir!r} does not exist")
    scale = _dataset_scale(rc.data_dir)
    if rc.scale is None:
        rc.scale = scale
    elif rc.scale != scale:
        raise ConfigError(f"config scale x{rc.scale} differs from dataset scale x{scale}")
    pairs, _ = data.load_dataset(rc.data_dir)
    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def show(row: training.LogRow):
        print(
            f"step {row.step:6d}  epoch {row.epoch:3d}  wfe {row.train_wfe_loss:.6f}  "
            f"val ssim {row.val_ssim:.4f}  psnr {row.val_psnr:.2f}",
            flush=True,
        )

    ckpt, history = training.train(pairs, rc.model_config(), rc.train_config(), on_row=show)
    ckpt_path = rc.checkpoint_path
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, ckpt_path)
    history.write_csv(out_dir / "training_log.csv")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {out_dir / 'training_log.csv'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    pairs = _load_eval_pairs(ckpt, args.data_dir, args.split)
    baseline = None if args.baseline == "none" else args.baseline
    result = training.evaluate(ckpt, pairs, baseline=baseline, ssim_mode=args.ssim)
    out_dir = Path(args.out_dir or Path(args.data_dir) / "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    training.write_records_csv(result.records, out_dir / "model_metrics.csv")
    training.write_records_csv([result.aggregate], out_dir / "model_aggregate.csv")
    if baseline:
        training.write_records_csv(result.baseline_records, out_dir / f"{baseline}_metrics.csv")
        training.write_records_csv([result.baseline_aggregate], out_dir / f"{baseline}_aggregate.csv")
    for k, rec in enumerate(result.records):
        line = f"{rec.item_id}: ours {_short(rec)}"
        if baseline:
            line += f", {baseline} {_short(result.baseline_records[k])}"
        print(line)
    agg = result.aggregate
    print(f"ours mean: mse={agg.mse:.6g} psnr={agg.psnr_db:.3f} ssim={agg.ssim:.4f} (n={len(result.records)})")
    if baseline:
        b = result.baseline_aggregate
        print(f"{baseline} mean: mse={b.mse:.6g} psnr={b.psnr_db:.3f} ssim={b.ssim:.4f}")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    img = imagecore.load_image(args.input)
    if img.shape[2] == 1 and ckpt.config.in_channels == 3:
        img = np.repeat(img, 3, axis=2)
    ckpt.config.check_input(img.shape[0], img.shape[1])
    out = training.predict(ckpt.build(), [img])[0]
    imagecore.save_image(imagecore.clamp01(out), args.output)
    print(f"{args.input} ({img.shape[1]}x{img.shape[0]}) -> {args.output} ({out.shape[1]}x{out.shape[0]})")
    return 0


def cmd_stitch(args) -> int:
    patch_dir = Path(args.patch_dir)
    files = sorted(p for p in patch_dir.iterdir() if p.suffix.lower() == ".png")
    if len(files) != args.rows * args.cols:
        raise ConfigError(
            f"{patch_dir} holds {len(files)} PNG files; a {args.rows}x{args.cols} grid needs {args.rows * args.cols}"
        )
    patches = [imagecore.load_image(p) for p in files]
    imagecore.save_image(imagecore.stitch_grid(patches, args.rows, args.cols), args.output)
    print(f"stitched {len(files)} patches -> {args.output}")
    return 0


def cmd_report(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    pairs = _load_eval_pairs(ckpt, args.data_dir, args.split)
    n = args.n_examples
    if n < 1:
        raise ParameterError(f"n_examples must be >= 1, got {n}")
    if n > len(pairs):
        log.warning("n_examples=%d exceeds the %d available pairs; clipping", n, len(pairs))
        n = len(pairs)
    pairs = pairs[:n]
    result = training.evaluate(ckpt, pairs, baseline=args.baseline, ssim_mode=args.ssim, keep_outputs=True)
    up = training.BASELINES[args.baseline]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for pair, out, rec, brec in zip(pairs, result.outputs, result.records, result.baseline_records):
        panels = [pair.hr, up(pair.lr, ckpt.config.scale), out]
        imagecore.save_image(np.concatenate(panels, axis=1), out_dir / f"{pair.id}_montage.png")
        caption = f"hr | {args.baseline} {_caption(brec)} | ours {_caption(rec)}\n"
        (out_dir / f"{pair.id}_caption.txt").write_text(caption, encoding="utf-8")
        print(f"{pair.id}: {args.baseline} {_short(brec)}, ours {_short(rec)}")
    return 0


def cmd_bench(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dims = (args.lr_size, args.lr_size) if args.lr_size else None
    res = training.benchmark_inference(ckpt, args.n, dims)
    print("mean_ms,std_ms,param_count")
    print(f"{res['mean_ms']:.4f},{res['std_ms']:.4f},{res['param_count']}")
    return 0


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frozensr", description="Residual attention U-Net super-resolution toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="tile source images into a paired dataset")
    s.add_argument("--src-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--scale", type=int, required=True, choices=(4, 8))
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--stride", type=int, default=128)
    s.add_argument("--split-fraction", type=float, default=0.1)
    s.add_argument("--split-by", choices=("patch", "source"), default="patch")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train from a run configuration file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a prepared dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--baseline", choices=("bicubic", "bilinear", "none"), default="bicubic")
    s.add_argument("--ssim", choices=("windowed", "global"), default="windowed")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="super-resolve one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("stitch", help="stitch a directory of equal-size patches into a grid")
    s.add_argument("--patch-dir", required=True)
    s.add_argument("--rows", type=int, default=4)
    s.add_argument("--cols", type=int, default=4)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_stitch)

    s = sub.add_parser("report", help="write [hr | baseline | ours] montages with captions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-examples", type=int, default=4)
    s.add_argument("--baseline", choices=tuple(training.BASELINES), default="bicubic")
    s.add_argument("--ssim", choices=("windowed", "global"), default="windowed")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("bench", help="time single-patch inference")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("-n", type=int, default=20)
    s.add_argument("--lr-size", type=int, help="low-resolution patch side (default 256/scale)")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (FrozenSRError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
