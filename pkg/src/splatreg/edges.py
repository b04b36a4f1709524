"""Canny edges on RGB images and the edge-aware depth smoothness loss."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

DEFAULT_LOW = 20.0
DEFAULT_HIGH = 200.0
DEFAULT_EPSILON = 1e-8

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def to_gray(img):
    """ITU-R 601 luma on the 0-255 scale; ``img`` is float RGB in [0, 1] or already gray."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    return img * 255.0


def gaussian_kernel(size=5, sigma=1.4):
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


def sobel_gradients(gray):
    gx = ndimage.correlate(gray, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(gray, _SOBEL_Y, mode="nearest")
    return gx, gy


def non_max_suppression(mag, gx, gy):
    """Thin the magnitude map along the quantized gradient direction (4 sectors).

    A pixel survives if it beats its backward neighbor strictly and its forward
    neighbor non-strictly, so a plateau two pixels wide keeps exactly one.
    """
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = np.zeros(mag.shape, dtype=np.int8)  # 0: horizontal gradient
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3

    padded = np.pad(mag, 1, mode="constant")
    H, W = mag.shape

    def shifted(dr, dc):
        return padded[1 + dr : 1 + dr + H, 1 + dc : 1 + dc + W]

    # (backward, forward) neighbor offsets per sector, rows growing downward
    offsets = {0: ((0, -1), (0, 1)), 1: ((-1, -1), (1, 1)), 2: ((-1, 0), (1, 0)), 3: ((-1, 1), (1, -1))}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (back, fwd) in offsets.items():
        sel = sector == s
        keep |= sel & (mag > shifted(*back)) & (mag >= shifted(*fwd))
    return np.where(keep, mag, 0.0)


def hysteresis(thin, low, high):
    """Weak pixels (> low) 8-connected to a strong pixel (>= high) become edges."""
    weak = thin > low
    strong = thin >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(thin.shape, dtype=bool)
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong & weak])] = True
    seeded[0] = False
    return seeded[labels]


def canny(img, low=DEFAULT_LOW, high=DEFAULT_HIGH, return_stages=False):
    """Binary edge mask (uint8, 1 on edges). Thresholds are on the 0-255 magnitude scale."""
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    if not (0 <= low < high <= 255):
        raise ValueError(f"thresholds must satisfy 0 <= low < high <= 255, got {low}, {high}")
    gray = to_gray(img)
    blurred = ndimage.correlate(gray, gaussian_kernel(), mode="nearest")
    gx, gy = sobel_gradients(blurred)
    mag = np.hypot(gx, gy)
    thin = non_max_suppression(mag, gx, gy)
    edges = hysteresis(thin, low, high).astype(np.uint8)
    if return_stages:
        return edges, {"gray": gray, "blurred": blurred, "magnitude": mag, "thinned": thin}
    return edges


def non_edge_mask(e):
    """1 where there is no edge, 0 on edges."""
    return (np.asarray(e) == 0).astype(np.uint8)


def cross_sum(x):
    """Sum over the 5-point cross (center + 4-neighbors), clipped at the borders."""
    out = x.copy()
    out[1:] += x[:-1]
    out[:-1] += x[1:]
    out[:, 1:] += x[:, :-1]
    out[:, :-1] += x[:, 1:]
    return out


def masked_local_mean(d, m, epsilon=DEFAULT_EPSILON):
    """Cross-neighborhood mean of ``d`` over pixels where ``m`` is 1."""
    d = np.asarray(d, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if d.shape != m.shape:
        raise ValueError(f"depth shape {d.shape} does not match mask shape {m.shape}")
    return cross_sum(d * m) / (cross_sum(m) + epsilon)


def edge_loss(d, m, epsilon=DEFAULT_EPSILON):
    """Masked squared deviation from the masked local mean; returns ``(loss, grad)``.

    Normalized by the number of unmasked pixels. With no unmasked pixels the
    loss is zero.
    """
    d = np.asarray(d, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if d.shape != m.shape:
        raise ValueError(f"depth shape {d.shape} does not match mask shape {m.shape}")
    count = m.sum()
    if count == 0:
        return 0.0, np.zeros_like(d)
    den = cross_sum(m) + epsilon
    resid = m * (d - cross_sum(d * m) / den)
    loss = np.sum(resid * resid) / count
    grad = 2.0 / count * (resid - m * cross_sum(resid / den))
    return float(loss), grad
