"""Training loss and image-quality metrics.

SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated at every fully
covered window position, per channel, averaged. ``ssim_with_grad`` also
returns the exact derivative with respect to the first image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0
DEFAULT_LAMBDA = 0.2


@dataclass(frozen=True)
class LossValue:
    total: float
    l1: float
    d_ssim: float
    lam: float


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


_WINDOW = gaussian_window()
_WINDOW_1D = _WINDOW.sum(axis=1)
_HALF = SSIM_WINDOW // 2


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidParameterError(f"expected (H, W, 3) images, got {a.shape}")
    return a, b


def _filter(x: np.ndarray) -> np.ndarray:
    """Window-weighted means at every fully covered position (separable, valid mode)."""
    y = ndimage.correlate1d(x, _WINDOW_1D, axis=0, mode="constant")
    y = ndimage.correlate1d(y, _WINDOW_1D, axis=1, mode="constant")
    return y[_HALF:-_HALF, _HALF:-_HALF]


def _filter_adjoint(g: np.ndarray) -> np.ndarray:
    """Transpose of ``_filter``: full-mode spread of the window (it is symmetric)."""
    y = np.pad(g, _HALF)
    y = ndimage.correlate1d(y, _WINDOW_1D, axis=0, mode="constant")
    return ndimage.correlate1d(y, _WINDOW_1D, axis=1, mode="constant")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 100 dB (identical images included)."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def _ssim_core(a: np.ndarray, b: np.ndarray, peak: float, want_grad: bool) -> tuple[float, np.ndarray | None]:
    a, b = _check_pair(a, b)
    h, w, _ = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise InvalidParameterError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    n = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1) * 3

    total = 0.0
    grad = np.zeros_like(a) if want_grad else None
    for ch in range(3):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _filter(x), _filter(y)
        mxx, myy, mxy = _filter(x * x), _filter(y * y), _filter(x * y)
        a1 = 2.0 * mx * my + c1
        a2 = 2.0 * (mxy - mx * my) + c2
        b1 = mx * mx + my * my + c1
        b2 = (mxx - mx * mx) + (myy - my * my) + c2
        d = b1 * b2
        s = a1 * a2 / d
        total += float(s.sum())
        if grad is not None:
            # Paired terms cancel exactly when a == b, so identical images get a zero gradient.
            g_mx = 2.0 * s * ((my / a1 - mx / b1) + (mx / b2 - my / a2)) / n
            g_mxx = (-s / b2) / n
            g_mxy = (2.0 * s / a2) / n
            grad[:, :, ch] = (
                _filter_adjoint(g_mx)
                + 2.0 * x * _filter_adjoint(g_mxx)
                + y * _filter_adjoint(g_mxy)
            )
    return total / n, grad


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    return _ssim_core(a, b, peak, want_grad=False)[0]


def ssim_with_grad(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> tuple[float, np.ndarray]:
    value, grad = _ssim_core(a, b, peak, want_grad=True)
    assert grad is not None
    return value, grad


def color_loss(
    rendered: np.ndarray, target: np.ndarray, lam: float = DEFAULT_LAMBDA
) -> tuple[LossValue, np.ndarray]:
    """total = L1 + lam * D-SSIM with D-SSIM = (1 - SSIM) / 2 and L1 a per-element mean.

    Returns the loss and its gradient with respect to ``rendered``.
    """
    rendered, target = _check_pair(rendered, target)
    if lam < 0:
        raise InvalidParameterError(f"lambda must be >= 0, got {lam}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    s, ds = ssim_with_grad(rendered, target)
    d_ssim = (1.0 - s) / 2.0
    grad = grad - 0.5 * lam * ds
    return LossValue(total=l1 + lam * d_ssim, l1=l1, d_ssim=d_ssim, lam=lam), grad
