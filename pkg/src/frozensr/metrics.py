"""Distortion metrics: MSE, PSNR and SSIM (global and Gaussian-windowed).

Colour images are scored per channel and the channel scores averaged.
Images are expected in [0, 1], so the PSNR peak and the SSIM dynamic range
both default to 1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import ShapeError, SizeError

PSNR_CAP_DB = 100.0
K1, K2 = 0.01, 0.03
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5

SSIMMode = Literal["windowed", "global"]


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if y.ndim == 2:
        y = y[:, :, None]
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(value: float, max_i: float = 1.0) -> float:
    if value <= 0.0:
        return PSNR_CAP_DB
    return 20.0 * math.log10(max_i / math.sqrt(value))


def psnr(x, y, max_i: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images score 100 dB."""
    return psnr_from_mse(mse(x, y), max_i)


def _ssim_formula(mu_x, mu_y, var_x, var_y, cov, L):
    c1 = (K1 * L) ** 2
    c2 = (K2 * L) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim_global(x, y, L: float = 1.0) -> float:
    """SSIM from whole-image statistics (population variances), channel mean."""
    x, y = _pair(x, y)
    mu_x = x.mean(axis=(0, 1))
    mu_y = y.mean(axis=(0, 1))
    dx = x - mu_x
    dy = y - mu_y
    var_x = (dx**2).mean(axis=(0, 1))
    var_y = (dy**2).mean(axis=(0, 1))
    cov = (dx * dy).mean(axis=(0, 1))
    return float(np.mean(_ssim_formula(mu_x, mu_y, var_x, var_y, cov, L)))


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    """Normalised 1D Gaussian taps; the 2D window is their outer product."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = len(taps)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ taps


def ssim_map(x, y, L: float = 1.0) -> np.ndarray:
    """Per-position SSIM over the valid region, shape ``(H-10, W-10, C)``."""
    x, y = _pair(x, y)
    if x.shape[0] < WINDOW_SIZE or x.shape[1] < WINDOW_SIZE:
        raise SizeError(f"windowed SSIM needs images of at least {WINDOW_SIZE}x{WINDOW_SIZE}, got {x.shape[0]}x{x.shape[1]}")
    taps = gaussian_window()
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    var_x = _filter_valid(x * x, taps) - mu_x**2
    var_y = _filter_valid(y * y, taps) - mu_y**2
    cov = _filter_valid(x * y, taps) - mu_x * mu_y
    return _ssim_formula(mu_x, mu_y, var_x, var_y, cov, L)


def ssim_windowed(x, y, L: float = 1.0) -> float:
    m = ssim_map(x, y, L)
    return float(np.mean(m.mean(axis=(0, 1))))


def ssim(x, y, L: float = 1.0, mode: SSIMMode = "windowed") -> float:
    if mode == "windowed":
        return ssim_windowed(x, y, L)
    if mode == "global":
        return ssim_global(x, y, L)
    raise ValueError(f"unknown SSIM mode {mode!r}")


@dataclass(frozen=True)
class MetricsRecord:
    item_id: str
    mse: float
    psnr_db: float
    ssim: float

    def as_row(self) -> dict:
        return asdict(self)


def score(item_id: str, output, target, ssim_mode: SSIMMode = "windowed") -> MetricsRecord:
    """Score one output against its ground truth."""
    err = mse(output, target)
    return MetricsRecord(item_id, err, psnr_from_mse(err), ssim(output, target, mode=ssim_mode))


def aggregate(records: Sequence[MetricsRecord], item_id: str = "mean") -> MetricsRecord:
    """Arithmetic mean of each per-item metric (mean of PSNR, not PSNR of mean MSE)."""
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    n = len(records)
    return MetricsRecord(
        item_id,
        math.fsum(r.mse for r in records) / n,
        math.fsum(r.psnr_db for r in records) / n,
        math.fsum(r.ssim for r in records) / n,
    )
