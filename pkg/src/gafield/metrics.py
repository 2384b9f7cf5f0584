"""Image quality metrics: PSNR and windowed SSIM with an analytic gradient.

SSIM uses the common splatting-pipeline recipe: an 11x11 Gaussian window
(sigma 1.5) applied per channel with zero padding, constants C1 = 0.01^2 and
C2 = 0.03^2 for a unit dynamic range, averaged over all pixels and channels.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import convolve1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

PSNR_CAP_DB = 100.0
_PSNR_MSE_FLOOR = 1e-10


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def compute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on unit range, capped at 100 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return -10.0 * math.log10(mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


_WINDOW = _gaussian_window()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable windowed mean over the spatial axes, zero padded.

    The window is symmetric, so this operator is its own adjoint; the
    gradient code relies on that.
    """
    out = convolve1d(img, _WINDOW, axis=0, mode="constant")
    return convolve1d(out, _WINDOW, axis=1, mode="constant")


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    mu_x = _blur(x)
    mu_y = _blur(y)
    var_x = _blur(x * x) - mu_x * mu_x
    var_y = _blur(y * y) - mu_y * mu_y
    cov = _blur(x * y) - mu_x * mu_y
    a = 2.0 * mu_x * mu_y + SSIM_C1
    b = 2.0 * cov + SSIM_C2
    c = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    d = var_x + var_y + SSIM_C2
    return mu_x, mu_y, a, b, c, d


def compute_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over pixels and channels."""
    a, b = _check_pair(a, b)
    _, _, ta, tb, tc, td = _ssim_terms(a, b)
    return float(np.mean((ta * tb) / (tc * td)))


def ssim_with_gradient(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM value plus d(mean SSIM)/dx holding y fixed."""
    x, y = _check_pair(x, y)
    mu_x, mu_y, a, b, c, d = _ssim_terms(x, y)
    cd = c * d
    ssim_map = (a * b) / cd
    value = float(np.mean(ssim_map))

    # Pixelwise partials of the SSIM map w.r.t. the windowed statistics.
    g_map = np.full_like(ssim_map, 1.0 / ssim_map.size)
    d_a = g_map * b / cd
    d_b = g_map * a / cd
    d_c = -g_map * ssim_map / c
    d_d = -g_map * ssim_map / d

    d_mu_x = 2.0 * mu_y * d_a + 2.0 * mu_x * d_c
    d_var_x = d_d
    d_cov = 2.0 * d_b
    # var_x and cov subtract products of means; fold those paths into d_mu_x.
    d_mu_x += -2.0 * mu_x * d_var_x - mu_y * d_cov

    # Adjoint of the (symmetric) blur pushes each statistic back to pixels.
    grad = _blur(d_mu_x) + 2.0 * x * _blur(d_var_x) + y * _blur(d_cov)
    return value, grad
