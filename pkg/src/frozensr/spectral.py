"""Weighted frequency error (WFE) loss.

The loss is an L1 distance between the complex 2D spectra of two images,
each frequency bin weighted by a radial ramp so that high spatial
frequencies cost more:

    L = 1/(H*W*C) * sum_c sum_{u,v} w[u,v] * |DFT(gen_c)[u,v] - DFT(tgt_c)[u,v]|

``|z|`` is smoothed to ``sqrt(|z|^2 + eps) - sqrt(eps)`` so the gradient
exists at zero while equal spectra still cost exactly nothing.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

EPS = 1e-12


def dft2(channel) -> np.ndarray:
    """Unnormalised forward DFT over the first two axes."""
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim < 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"dft2 needs an HxW grid, got shape {x.shape}")
    return np.fft.fft2(x, axes=(0, 1))


def idft2(spectrum) -> np.ndarray:
    """Inverse of :func:`dft2`, carrying the 1/(H*W) factor."""
    return np.fft.ifft2(np.asarray(spectrum), axes=(0, 1))


def build_weight_map(h: int, w: int, alpha: float = 1.0) -> np.ndarray:
    """Radial weight ramp ``1 + alpha * r / r_max`` over DFT bins.

    ``r`` is measured with wrapped (aliasing-aware) frequency indices so bins
    that are conjugates of each other receive the same weight. The returned
    array is read-only.
    """
    if alpha < 0:
        raise ParameterError(f"alpha must be non-negative, got {alpha}")
    if h < 1 or w < 1:
        raise ShapeError(f"weight map needs positive dimensions, got {h}x{w}")
    i = np.arange(h)
    j = np.arange(w)
    fi = np.minimum(i, h - i).astype(np.float64)
    fj = np.minimum(j, w - j).astype(np.float64)
    r = np.sqrt(fi[:, None] ** 2 + fj[None, :] ** 2)
    r_max = np.sqrt((h // 2) ** 2 + (w // 2) ** 2)
    weights = np.ones((h, w)) if r_max == 0 else 1.0 + alpha * r / r_max
    weights.flags.writeable = False
    return weights


def _prepare(generated, target, weights):
    gen = np.asarray(generated, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if gen.ndim == 2:
        gen = gen[:, :, None]
    if tgt.ndim == 2:
        tgt = tgt[:, :, None]
    if gen.shape != tgt.shape or gen.ndim != 3:
        raise ShapeError(f"generated {gen.shape} and target {tgt.shape} differ")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != gen.shape[:2]:
        raise ShapeError(f"weight map {weights.shape} does not match image {gen.shape[:2]}")
    return gen, tgt, weights


def wfe_loss_and_gradient(generated, target, weights, eps: float = EPS) -> tuple[float, np.ndarray]:
    """Loss value and its exact gradient with respect to ``generated``.

    With ``D = DFT(gen - tgt)`` and ``s = sqrt(|D|^2 + eps)`` the gradient is
    ``Re(IDFT(w * D / s)) / C``; the ``H*W`` factor of the inverse cancels the
    loss normalisation.
    """
    gen, tgt, w = _prepare(generated, target, weights)
    h, wd, c = gen.shape
    diff = dft2(gen - tgt)
    mag = np.sqrt(diff.real**2 + diff.imag**2 + eps)
    loss = float(np.sum(w[:, :, None] * (mag - np.sqrt(eps))) / (h * wd * c))
    grad = idft2(w[:, :, None] * diff / mag).real / c
    if np.asarray(generated).ndim == 2:
        grad = grad[:, :, 0]
    return loss, grad


def wfe_loss(generated, target, weights, eps: float = EPS) -> float:
    gen, tgt, w = _prepare(generated, target, weights)
    h, wd, c = gen.shape
    diff = dft2(gen - tgt)
    mag = np.sqrt(diff.real**2 + diff.imag**2 + eps)
    return float(np.sum(w[:, :, None] * (mag - np.sqrt(eps))) / (h * wd * c))


def wfe_gradient(generated, target, weights, eps: float = EPS) -> np.ndarray:
    return wfe_loss_and_gradient(generated, target, weights, eps)[1]
