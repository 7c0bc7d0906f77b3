"""Image container helpers, resampling kernels, patch tiling and raster I/O.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in {1, 3},
dtype float64 and values in [0, 1]. Functions here never modify their inputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
from PIL import Image as PILImage

from .errors import DimensionError, ImageIOError, ShapeError, SizeError

Split = Literal["train", "test"]


def as_image(data, *, check_range: bool = True) -> np.ndarray:
    """Coerce ``data`` to a validated ``(H, W, C)`` float64 image.

    A 2D array is treated as a single-channel image.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"image must be 2D or 3D, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1:
        raise ShapeError(f"image must be at least 1x1, got {h}x{w}")
    if c not in (1, 3):
        raise ShapeError(f"image must have 1 or 3 channels, got {c}")
    if check_range:
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"image values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
    return arr


def clamp01(img: np.ndarray) -> np.ndarray:
    """Clip raw network output to the valid intensity range."""
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


# --------------------------------------------------------------------------
# resampling


def box_downsample(img, s: int) -> np.ndarray:
    """Average each ``s x s`` block into one output pixel."""
    img = as_image(img)
    s = int(s)
    if s < 1:
        raise DimensionError(f"scale factor must be >= 1, got {s}")
    h, w, c = img.shape
    if h % s:
        raise DimensionError(f"height {h} is not divisible by scale {s}")
    if w % s:
        raise DimensionError(f"width {w} is not divisible by scale {s}")
    if s & (s - 1):
        return img.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))
    # pairwise halving keeps blocks of equal values exact (v + v is exact)
    out = img
    while s > 1:
        out = 0.5 * (out[0::2] + out[1::2])
        out = 0.5 * (out[:, 0::2] + out[:, 1::2])
        s //= 2
    return out


def nearest_upsample(img, s: int) -> np.ndarray:
    """Replicate every pixel into an ``s x s`` block."""
    img = as_image(img)
    return np.repeat(np.repeat(img, s, axis=0), s, axis=1)


def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    # Keys cubic convolution weights for taps at offsets -1, 0, 1, 2 from floor(src).
    d = np.stack([1.0 + t, t, 1.0 - t, 2.0 - t], axis=-1)
    near = ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0
    far = ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a
    return np.where(d <= 1.0, near, far)


@lru_cache(maxsize=64)
def _upsample_matrix_cached(n: int, s: int, method: str) -> np.ndarray:
    dst = np.arange(n * s, dtype=np.float64)
    src = (dst + 0.5) / s - 0.5
    base = np.floor(src)
    t = src - base
    base = base.astype(np.int64)
    if method == "bilinear":
        offsets = np.array([0, 1])
        weights = np.stack([1.0 - t, t], axis=-1)
    elif method == "bicubic":
        offsets = np.array([-1, 0, 1, 2])
        weights = _cubic_weights(t)
    else:
        raise ValueError(f"unknown interpolation method {method!r}")
    idx = np.clip(base[:, None] + offsets[None, :], 0, n - 1)
    mat = np.zeros((n * s, n), dtype=np.float64)
    rows = np.repeat(np.arange(n * s), len(offsets))
    # clamped taps land on the same column and must accumulate
    np.add.at(mat, (rows, idx.ravel()), weights.ravel())
    mat.flags.writeable = False
    return mat


def upsample_matrix(n: int, s: int, method: str = "bilinear") -> np.ndarray:
    """Return the ``(n*s, n)`` linear map that resamples one axis.

    Uses half-pixel centres, ``src = (dst + 0.5) / s - 0.5``, and clamps
    source indices at the borders. Rows sum to one.
    """
    if int(s) < 1:
        raise DimensionError(f"scale factor must be >= 1, got {s}")
    return _upsample_matrix_cached(int(n), int(s), method)


def _separable_upsample(img: np.ndarray, s: int, method: str) -> np.ndarray:
    h, w, _ = img.shape
    mh = upsample_matrix(h, s, method)
    mw = upsample_matrix(w, s, method)
    out = np.einsum("ah,hwc->awc", mh, img)
    return np.einsum("bw,awc->abc", mw, out)


def bilinear_upsample(img, s: int) -> np.ndarray:
    img = as_image(img)
    out = _separable_upsample(img, int(s), "bilinear")
    # convex combinations can exceed [0, 1] only by rounding
    return np.clip(out, 0.0, 1.0)


def bicubic_upsample(img, s: int) -> np.ndarray:
    """Catmull-Rom (a = -0.5) upsampling, clamped to [0, 1] afterwards."""
    img = as_image(img)
    return np.clip(_separable_upsample(img, int(s), "bicubic"), 0.0, 1.0)


# --------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PatchRecord:
    source_id: str
    origin_row: int
    origin_col: int
    size: int
    split: Split = "train"

    @property
    def patch_id(self) -> str:
        # zero padding keeps lexicographic order row-major
        return f"{self.source_id}_{self.origin_row:05d}_{self.origin_col:05d}"


@dataclass
class PatchManifest:
    entries: list[PatchRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def validate(self, source_shapes: dict[str, tuple[int, int]] | None = None) -> None:
        seen = set()
        for e in self.entries:
            key = (e.source_id, e.origin_row, e.origin_col)
            if key in seen:
                raise ShapeError(f"duplicate patch origin {key}")
            seen.add(key)
            if e.split not in ("train", "test"):
                raise ValueError(f"invalid split {e.split!r} for {key}")
            if source_shapes is not None:
                h, w = source_shapes[e.source_id][:2]
                if e.origin_row < 0 or e.origin_col < 0 or e.origin_row + e.size > h or e.origin_col + e.size > w:
                    raise SizeError(f"patch {key} of size {e.size} exceeds source bounds {h}x{w}")

    def extend(self, other: Iterable[PatchRecord]) -> None:
        self.entries.extend(other)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(json.dumps(asdict(e), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "PatchManifest":
        entries = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    entries.append(PatchRecord(**json.loads(line)))
        manifest = cls(entries)
        manifest.validate()
        return manifest


def patch_count(dim: int, size: int, stride: int) -> int:
    return (dim - size) // stride + 1


def extract_patches(
    source,
    size: int = 256,
    stride: int = 128,
    source_id: str = "image",
    split: Split = "train",
) -> tuple[PatchManifest, list[np.ndarray]]:
    """Tile ``source`` into ``size x size`` patches at multiples of ``stride``.

    Origins advance while ``origin + size <= dim``; order is row-major.
    """
    source = as_image(source)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if size < 1:
        raise ValueError(f"patch size must be >= 1, got {size}")
    h, w, _ = source.shape
    if h < size or w < size:
        raise SizeError(f"source {source_id!r} is {h}x{w}, smaller than patch size {size}")
    records, patches = [], []
    for r in range(0, h - size + 1, stride):
        for c in range(0, w - size + 1, stride):
            records.append(PatchRecord(source_id, r, c, size, split))
            patches.append(source[r : r + size, c : c + size].copy())
    return PatchManifest(records), patches


def split_grid(img, rows: int, cols: int) -> list[np.ndarray]:
    """Cut an image into a non-overlapping ``rows x cols`` grid, row-major."""
    img = as_image(img)
    h, w, _ = img.shape
    if h % rows or w % cols:
        raise ShapeError(f"{h}x{w} image cannot be split into a {rows}x{cols} grid")
    ph, pw = h // rows, w // cols
    return [img[i * ph : (i + 1) * ph, j * pw : (j + 1) * pw].copy() for i in range(rows) for j in range(cols)]


def stitch_grid(patches: list, rows: int, cols: int) -> np.ndarray:
    """Place row-major ``patches`` edge to edge; no blending."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"grid must be at least 1x1, got {rows}x{cols}")
    if len(patches) != rows * cols:
        raise ShapeError(f"expected {rows * cols} patches for a {rows}x{cols} grid, got {len(patches)}")
    patches = [as_image(p) for p in patches]
    shape = patches[0].shape
    for i, p in enumerate(patches):
        if p.shape != shape:
            raise ShapeError(f"patch {i} has shape {p.shape}, expected {shape}")
    grid = [np.concatenate(patches[r * cols : (r + 1) * cols], axis=1) for r in range(rows)]
    return np.concatenate(grid, axis=0)


# --------------------------------------------------------------------------
# raster I/O


def to_uint8(img) -> np.ndarray:
    """Quantise with round-half-up after clamping to [0, 1]."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Read an 8-bit raster as an ``(H, W, C)`` float image in [0, 1].

    Greyscale files give one channel; RGB, RGBA and palette files give three
    (alpha is dropped).
    """
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "RGB"):
                pass
            elif mode in ("RGBA", "P", "LA", "CMYK", "YCbCr"):
                im = im.convert("L" if mode == "LA" else "RGB")
            else:
                raise ImageIOError(f"{path}: unsupported pixel mode {mode!r} (8-bit L/RGB expected)")
            arr = np.asarray(im, dtype=np.uint8)
    except ImageIOError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"{path}: cannot read image ({exc})") from exc
    return as_image(arr.astype(np.float64) / 255.0)


def save_image(img, path) -> None:
    img = as_image(img, check_range=False)
    data = to_uint8(img)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    path = Path(path)
    try:
        PILImage.fromarray(data).save(path, format=None if path.suffix else "PNG")
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc
