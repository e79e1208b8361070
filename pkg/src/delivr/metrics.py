"""PSNR and SSIM for images with unit dynamic range."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ShapeError, ValidationError

PSNR_INF = math.inf
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(pred, target, op):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(op, pred.shape, target.shape)
    return pred, target


def psnr(pred, target) -> float:
    """10 log10(1 / MSE); identical inputs give ``inf``."""
    pred, target = _pair(pred, target, "psnr")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def _to_gray(img):
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    if img.ndim == 2:
        return img
    raise ValidationError(f"expected (H, W), (H, W, 1) or (H, W, 3), got {img.shape}")


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred, target, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    """Mean single-scale SSIM over all valid (fully inside) window positions."""
    pred, target = _pair(pred, target, "ssim")
    x, y = _to_gray(pred), _to_gray(target)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValidationError(f"image {x.shape} smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    half = window // 2

    def filt(a):
        return ndimage.correlate(a, w, mode="constant")[half:a.shape[0] - half, half:a.shape[1] - half]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
