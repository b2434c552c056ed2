"""Image quality metrics: PSNR and SSIM, plus the analytic SSIM gradient that
the training loss consumes.

SSIM convention (shared by the metric, its gradient, and the scalar reference
implementation in the tests): 11x11 Gaussian window with sigma 1.5 normalized
to unit sum, zero-padded same-size local statistics, constants
C1 = 0.01^2 and C2 = 0.03^2 for unit dynamic range, per-channel maps averaged
over all pixels and channels.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0, 1]; identical images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable zero-padded same-size convolution over the two leading axes."""
    out = convolve1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, kernel, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x: np.ndarray, y: np.ndarray, kernel: np.ndarray):
    mu_x = _blur(x, kernel)
    mu_y = _blur(y, kernel)
    sxx = _blur(x * x, kernel) - mu_x * mu_x
    syy = _blur(y * y, kernel) - mu_y * mu_y
    sxy = _blur(x * y, kernel) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all pixels and channels; in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kernel = gaussian_window()
    _, _, a1, a2, b1, b2 = _ssim_terms(a, b, kernel)
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_with_grad(x: np.ndarray, y: np.ndarray):
    """(mean SSIM, d mean-SSIM / dx) for rendered image x against target y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
        y = y[..., None]
    kernel = gaussian_window()
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y, kernel)
    denom = b1 * b2
    s = (a1 * a2) / denom

    # Per-pixel partials with respect to the three convolved fields of x.
    g_mu = (2.0 * mu_y * (a2 - a1) / denom) + 2.0 * mu_x * s * (1.0 / b2 - 1.0 / b1)
    g_x2 = -s / b2  # field K*(x^2)
    g_xy = 2.0 * a1 / denom  # field K*(x*y)

    # Adjoint of the zero-padded convolution is the same convolution
    # (symmetric kernel).
    grad = _blur(g_mu, kernel) + 2.0 * x * _blur(g_x2, kernel) + y * _blur(g_xy, kernel)
    grad /= x.size
    mean_ssim = float(np.mean(s))
    if squeeze:
        grad = grad[..., 0]
    return mean_ssim, grad
