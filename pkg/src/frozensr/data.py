"""Paired low/high-resolution datasets: construction, shuffling, disk layout.

A prepared dataset directory looks like::

    dataset.json        scale, patch size, stride, split settings
    manifest.jsonl      one PatchRecord per line
    hr/<patch_id>.png   high-resolution patches
    lr/<patch_id>.png   box-downsampled counterparts
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import imagecore
from .errors import DatasetError, DimensionError, ImageIOError, SizeError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
LR_TOLERANCE = 0.5 / 255.0 + 1e-9


@dataclass(frozen=True)
class DatasetPair:
    id: str
    lr: np.ndarray
    hr: np.ndarray
    split: Literal["train", "test"] = "train"

    @property
    def scale(self) -> int:
        return self.hr.shape[0] // self.lr.shape[0]


def check_pair(pair: DatasetPair, scale: int) -> None:
    """Raise unless ``pair.lr`` is exactly the box downsample of ``pair.hr``."""
    expected = imagecore.box_downsample(pair.hr, scale)
    if pair.lr.shape != expected.shape or not np.array_equal(pair.lr, expected):
        raise DatasetError(f"pair {pair.id!r}: lr is not the x{scale} box downsample of hr")


def build_pairs(
    hr_patches: Sequence[np.ndarray],
    scale: int,
    ids: Sequence[str] | None = None,
    splits: Sequence[str] | None = None,
) -> list[DatasetPair]:
    """Attach a box-downsampled input to every high-resolution patch."""
    if ids is None:
        ids = [f"patch_{i:06d}" for i in range(len(hr_patches))]
    if splits is None:
        splits = ["train"] * len(hr_patches)
    if not len(hr_patches) == len(ids) == len(splits):
        raise DatasetError("hr_patches, ids and splits must have equal length")
    bad = []
    pairs = []
    for hr, pid, split in zip(hr_patches, ids, splits):
        hr = imagecore.as_image(hr)
        try:
            lr = imagecore.box_downsample(hr, scale)
        except DimensionError:
            bad.append(pid)
            continue
        pairs.append(DatasetPair(pid, lr, hr, split))
    if bad:
        raise DatasetError(f"patches not divisible by scale {scale}: {', '.join(bad)}")
    return pairs


def shuffle_and_batch(pairs: Sequence, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Seeded per-epoch permutation split into batches; the short tail batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(pairs) == 0:
        raise DatasetError("cannot batch an empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    return [[pairs[i] for i in order[k : k + batch_size]] for k in range(0, len(order), batch_size)]


# --------------------------------------------------------------------------
# on-disk datasets


def _source_files(src_dir: Path) -> list[Path]:
    return sorted(p for p in src_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _to_rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


def assign_splits(keys: Sequence[str], split_fraction: float, seed: int) -> dict[str, str]:
    if not 0.0 <= split_fraction <= 1.0:
        raise ValueError(f"split_fraction must be in [0, 1], got {split_fraction}")
    n_test = int(round(split_fraction * len(keys)))
    order = np.random.default_rng(seed).permutation(len(keys))
    test = {keys[i] for i in order[:n_test]}
    return {k: ("test" if k in test else "train") for k in keys}


@dataclass
class PrepareSummary:
    sources: int
    skipped: int
    patches: int
    train: int
    test: int


def prepare_dataset(
    src_dir,
    out_dir,
    scale: int,
    size: int = 256,
    stride: int = 128,
    split_fraction: float = 0.1,
    seed: int = 0,
    split_by: Literal["patch", "source"] = "patch",
) -> PrepareSummary:
    """Tile every raster in ``src_dir`` and write a paired dataset to ``out_dir``.

    Sources smaller than ``size`` are skipped and counted. ``split_by="source"``
    holds out whole source images so overlapping patches never straddle the
    train/test boundary.
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    if not src_dir.is_dir():
        raise DatasetError(f"source directory {src_dir} does not exist")
    if size % scale:
        raise DimensionError(f"patch size {size} is not divisible by scale {scale}")
    files = _source_files(src_dir)
    if not files:
        raise DatasetError(f"no readable raster images in {src_dir}")

    manifest = imagecore.PatchManifest()
    patches: list[np.ndarray] = []
    skipped = 0
    used_sources = []
    for path in files:
        try:
            img = _to_rgb(imagecore.load_image(path))
        except ImageIOError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            skipped += 1
            continue
        try:
            m, ps = imagecore.extract_patches(img, size, stride, source_id=path.stem)
        except SizeError:
            skipped += 1
            continue
        used_sources.append(path.stem)
        manifest.extend(m)
        patches.extend(ps)
    if skipped:
        log.warning("%d source image(s) skipped (unreadable or smaller than %d px)", skipped, size)
    if not patches:
        raise DatasetError(f"no source image in {src_dir} is at least {size}x{size}")

    if split_by == "source":
        by_source = assign_splits(used_sources, split_fraction, seed)
        splits = [by_source[e.source_id] for e in manifest]
    elif split_by == "patch":
        by_patch = assign_splits([e.patch_id for e in manifest], split_fraction, seed)
        splits = [by_patch[e.patch_id] for e in manifest]
    else:
        raise ValueError(f"split_by must be 'patch' or 'source', got {split_by!r}")
    manifest = imagecore.PatchManifest(
        [imagecore.PatchRecord(e.source_id, e.origin_row, e.origin_col, e.size, s) for e, s in zip(manifest, splits)]
    )
    manifest.validate()

    (out_dir / "hr").mkdir(parents=True, exist_ok=True)
    (out_dir / "lr").mkdir(parents=True, exist_ok=True)
    for rec, hr in zip(manifest, patches):
        # derive lr from the quantised hr so the stored pair stays consistent
        hr_q = imagecore.to_uint8(hr) / 255.0
        imagecore.save_image(hr_q, out_dir / "hr" / f"{rec.patch_id}.png")
        imagecore.save_image(imagecore.box_downsample(hr_q, scale), out_dir / "lr" / f"{rec.patch_id}.png")
    manifest.to_jsonl(out_dir / "manifest.jsonl")
    meta = {
        "scale": scale,
        "size": size,
        "stride": stride,
        "split_fraction": split_fraction,
        "split_by": split_by,
        "seed": seed,
    }
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    n_test = sum(1 for s in splits if s == "test")
    return PrepareSummary(len(used_sources), skipped, len(patches), len(patches) - n_test, n_test)


def read_dataset_meta(data_dir) -> dict:
    path = Path(data_dir) / "dataset.json"
    if not path.is_file():
        raise DatasetError(f"{data_dir} is not a prepared dataset (missing dataset.json)")
    return json.loads(path.read_text(encoding="utf-8"))


def load_dataset(data_dir, split: str | None = None) -> tuple[list[DatasetPair], dict]:
    """Load pairs from a prepared directory, optionally one split only.

    The in-memory ``lr`` is recomputed from ``hr`` so the pair contract holds
    exactly; the stored lr file must agree with it to within half an 8-bit step.
    """
    data_dir = Path(data_dir)
    meta = read_dataset_meta(data_dir)
    scale = int(meta["scale"])
    manifest = imagecore.PatchManifest.from_jsonl(data_dir / "manifest.jsonl")
    pairs = []
    for rec in manifest:
        if split is not None and rec.split != split:
            continue
        hr = imagecore.load_image(data_dir / "hr" / f"{rec.patch_id}.png")
        lr = imagecore.box_downsample(hr, scale)
        stored = imagecore.load_image(data_dir / "lr" / f"{rec.patch_id}.png")
        if stored.shape != lr.shape or np.max(np.abs(stored - lr)) > LR_TOLERANCE:
            raise DatasetError(f"pair {rec.patch_id!r}: stored lr does not match the x{scale} box downsample of hr")
        pair = DatasetPair(rec.patch_id, lr, hr, rec.split)
        check_pair(pair, scale)
        pairs.append(pair)
    return pairs, meta
