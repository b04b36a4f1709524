"""Patch- and image-level depth normalization and the dual-scale depth loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_GUARD = 1e-8
DEFAULT_DELTA = 1e-8
DEFAULT_TOLERANCE = 0.05


@dataclass(frozen=True)
class PatchGrid:
    """Non-overlapping square tiles anchored at (0, 0); edge tiles may be smaller."""

    patch_size: int

    def __post_init__(self):
        if int(self.patch_size) < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")

    def labels(self, shape):
        """Tile index of every pixel, shape ``(H, W)``."""
        H, W = shape
        p = int(self.patch_size)
        tiles_x = -(-W // p)
        rows = np.arange(H) // p
        cols = np.arange(W) // p
        return rows[:, None] * tiles_x + cols[None, :]

    def count(self, shape):
        H, W = shape
        p = int(self.patch_size)
        return (-(-H // p)) * (-(-W // p))


def _tile_stats(d, grid):
    lab = grid.labels(d.shape).ravel()
    nt = grid.count(d.shape)
    flat = d.ravel()
    size = np.bincount(lab, minlength=nt).astype(np.float64)
    mean = np.bincount(lab, weights=flat, minlength=nt) / size
    centered = flat - mean[lab]
    var = np.bincount(lab, weights=centered * centered, minlength=nt) / size
    return lab, size, mean, centered, np.sqrt(var)


def patch_normalize(d, grid, delta=DEFAULT_DELTA):
    """Per-tile standardization ``(D - mean_P) / (std_P + delta)``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    d = np.asarray(d, dtype=np.float64)
    lab, _, _, centered, std = _tile_stats(d, grid)
    return (centered / (std[lab] + delta)).reshape(d.shape)


def image_normalize(d, grid, strict=False):
    """Tile-mean subtraction divided by the image-wide standard deviation.

    A constant image (std below the guard) maps to zeros unless ``strict``.
    """
    d = np.asarray(d, dtype=np.float64)
    lab, _, _, centered, _ = _tile_stats(d, grid)
    sigma = d.std()
    if sigma < SIGMA_GUARD:
        if strict:
            raise ValueError(f"image standard deviation {sigma:.3g} below guard")
        return np.zeros_like(d)
    return (centered / sigma).reshape(d.shape)


def _patch_normalize_vjp(d, grid, delta, g, stop_stats):
    lab, size, _, centered, std = _tile_stats(d, grid)
    nt = len(size)
    g = g.ravel()
    s = std + delta
    if stop_stats:
        return (g / s[lab]).reshape(d.shape)
    g_mean = np.bincount(lab, weights=g, minlength=nt) / size
    proj = np.bincount(lab, weights=g * centered, minlength=nt)
    safe_std = np.where(std > 0, std, 1.0)
    coef = np.where(std > 0, proj / (s * s * size * safe_std), 0.0)
    out = (g - g_mean[lab]) / s[lab] - coef[lab] * centered
    return out.reshape(d.shape)


def _image_normalize_vjp(d, grid, g, stop_stats):
    sigma = d.std()
    if sigma < SIGMA_GUARD:
        return np.zeros_like(d)
    lab, size, _, centered, _ = _tile_stats(d, grid)
    nt = len(size)
    g = g.ravel()
    if stop_stats:
        return (g / sigma).reshape(d.shape)
    g_mean = np.bincount(lab, weights=g, minlength=nt) / size
    glob = d.ravel() - d.mean()
    proj = np.dot(g, centered)
    out = (g - g_mean[lab]) / sigma - proj / (sigma**3 * d.size) * glob
    return out.reshape(d.shape)


def dead_zone_square(r, tolerance):
    """``max(|r| - tol, 0)^2`` and its derivative."""
    excess = np.maximum(np.abs(r) - tolerance, 0.0)
    return excess * excess, 2.0 * excess * np.sign(r)


def depth_loss(d, prior, grid, gamma=0.1, eta=1.0, tolerance=DEFAULT_TOLERANCE, delta=DEFAULT_DELTA,
               stop_stats=False):
    """Dual-scale depth loss against a prior depth map.

    Returns ``(loss, grad)`` where ``grad`` is the gradient w.r.t. ``d``. The
    normalization statistics of ``d`` are differentiated through unless
    ``stop_stats`` is set. The prior is a constant target.
    """
    d = np.asarray(d, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if d.shape != prior.shape:
        raise ValueError(f"depth shape {d.shape} does not match prior shape {prior.shape}")
    if gamma < 0 or eta < 0 or tolerance < 0:
        raise ValueError("gamma, eta and tolerance must be non-negative")

    r_patch = patch_normalize(d, grid, delta) - patch_normalize(prior, grid, delta)
    r_image = image_normalize(d, grid) - image_normalize(prior, grid)
    h_patch, dh_patch = dead_zone_square(r_patch, tolerance)
    h_image, dh_image = dead_zone_square(r_image, tolerance)
    loss = gamma * h_patch.mean() + eta * h_image.mean()

    grad = _patch_normalize_vjp(d, grid, delta, gamma * dh_patch / d.size, stop_stats)
    grad += _image_normalize_vjp(d, grid, eta * dh_image / d.size, stop_stats)
    return float(loss), grad


def depth_loss_signature(d, prior, grid, tolerance=DEFAULT_TOLERANCE, delta=DEFAULT_DELTA):
    """Which residuals sit outside the dead zone, and their signs (the loss's kink structure)."""
    r_patch = patch_normalize(d, grid, delta) - patch_normalize(prior, grid, delta)
    r_image = image_normalize(d, grid) - image_normalize(prior, grid)
    return (np.sign(r_patch) * (np.abs(r_patch) > tolerance)).astype(np.int8).tobytes() + \
        (np.sign(r_image) * (np.abs(r_image) > tolerance)).astype(np.int8).tobytes()
