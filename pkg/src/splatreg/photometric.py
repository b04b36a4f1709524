"""Color reconstruction losses (L1, D-SSIM) and image quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

C1 = 0.01**2
C2 = 0.03**2
WINDOW = 11
WINDOW_SIGMA = 1.5
PSNR_CAP = 99.0


@dataclass
class LossWeights:
    lambda_dssim: float = 0.2
    gamma: float = 0.1
    eta: float = 1.0
    beta: float = 0.1
    phi: float = 0.8
    omega: float = 0.99
    tau_edge: float = 1e-2
    tau_smooth: float = 1e-4
    delta: float = 1e-8
    epsilon: float = 1e-8
    tolerance: float = 0.05

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if not 0 < self.omega < 1:
            raise ValueError(f"omega must lie in (0, 1), got {self.omega}")
        if not self.tau_edge > self.tau_smooth:
            raise ValueError("tau_edge must exceed tau_smooth")


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} does not match gt shape {gt.shape}")
    return pred, gt


def l1_loss(pred, gt):
    pred, gt = _check_pair(pred, gt)
    diff = pred - gt
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def _window_1d():
    ax = np.arange(WINDOW) - WINDOW // 2
    k = np.exp(-(ax**2) / (2 * WINDOW_SIGMA**2))
    return k / k.sum()


_WIN = _window_1d()
_HALF = WINDOW // 2


def _filter(x):
    """Separable Gaussian filter keeping only the fully-supported (valid) region."""
    y = ndimage.correlate1d(x, _WIN, axis=0, mode="constant")
    y = ndimage.correlate1d(y, _WIN, axis=1, mode="constant")
    return y[_HALF:-_HALF, _HALF:-_HALF]


def _filter_adjoint(g, shape):
    full = np.zeros(shape)
    full[_HALF:-_HALF, _HALF:-_HALF] = g
    y = ndimage.correlate1d(full, _WIN, axis=0, mode="constant")
    return ndimage.correlate1d(y, _WIN, axis=1, mode="constant")


def _ssim_terms(a, b):
    mu_a, mu_b = _filter(a), _filter(b)
    e_aa, e_bb, e_ab = _filter(a * a), _filter(b * b), _filter(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + C1
    A2 = 2 * cov + C2
    B1 = mu_a * mu_a + mu_b * mu_b + C1
    B2 = var_a + var_b + C2
    return mu_a, mu_b, A1, A2, B1, B2


def _as_channels(img):
    return img[..., None] if img.ndim == 2 else img


def ssim(pred, gt, with_grad=False):
    """Mean SSIM over the valid region and channels (11x11 Gaussian window, sigma 1.5)."""
    pred, gt = _check_pair(pred, gt)
    H, W = pred.shape[:2]
    if H < WINDOW or W < WINDOW:
        raise ValueError(f"image {H}x{W} smaller than the {WINDOW}x{WINDOW} SSIM window")
    a, b = _as_channels(pred), _as_channels(gt)
    C = a.shape[2]
    total = 0.0
    grad = np.zeros_like(a) if with_grad else None
    for c in range(C):
        mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a[..., c], b[..., c])
        S = A1 * A2 / (B1 * B2)
        total += S.mean()
        if with_grad:
            w = 1.0 / (S.size * C)
            g_exx = -S / B2 * w
            g_exy = 2 * S / A2 * w
            g_ex = S * (2 * mu_b / A1 - 2 * mu_b / A2 - 2 * mu_a / B1 + 2 * mu_a / B2) * w
            shape = a.shape[:2]
            grad[..., c] = (_filter_adjoint(g_ex, shape) + 2 * a[..., c] * _filter_adjoint(g_exx, shape)
                            + b[..., c] * _filter_adjoint(g_exy, shape))
    value = total / C
    if with_grad:
        return float(value), grad.reshape(pred.shape)
    return float(value)


def dssim_loss(pred, gt):
    """``(1 - SSIM) / 2`` and its gradient w.r.t. ``pred``."""
    value, grad = ssim(pred, gt, with_grad=True)
    return (1.0 - value) / 2.0, -0.5 * grad


def color_loss(pred, gt, lam=0.2):
    l1, g1 = l1_loss(pred, gt)
    if lam == 0:
        return l1, g1
    ds, gd = dssim_loss(pred, gt)
    return l1 + lam * ds, g1 + lam * gd


def psnr(pred, gt):
    """PSNR in dB for images in [0, 1]; ``inf`` for identical images."""
    pred, gt = _check_pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def capped_psnr(value):
    return min(value, PSNR_CAP)
