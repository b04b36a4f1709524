"""Front-to-back alpha compositing of projected Gaussians, with reverse-mode gradients.

Every primitive is splatted into the pixels of its 3-sigma bounding box. The
(pixel, primitive) entries are kept as one flat array sorted by pixel and,
within a pixel, by distance to the camera center. Transmittance is a
segmented cumulative sum of ``log(1 - alpha)``; the backward pass needs the
matching segmented suffix sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import InvalidParameterError, LOWPASS, Z_NEAR, conic, project_gaussians, project_vjp

ALPHA_MAX = 0.99
CUTOFF_SIGMA = 3.0
DEFAULT_OMEGA = 0.99


@dataclass
class RenderGradients:
    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))

    def __iter__(self):
        yield from (self.mu, self.scale, self.rotation, self.opacity, self.color)


@dataclass
class Entries:
    """Flat footprint entries, sorted by pixel then compositing order."""

    pix: np.ndarray  # (E,) flat pixel index
    prim: np.ndarray  # (E,) primitive index
    slot: np.ndarray  # (E,) rank among the primitives covering the pixel
    counts: np.ndarray  # (P,) entries per pixel
    first: np.ndarray  # (P,) offset of each pixel's first entry

    @property
    def width(self):
        return int(self.counts.max()) if len(self.counts) else 0

    def padded(self, values, fill=0.0):
        """Scatter per-entry ``values`` into a ``(pixels, width)`` table."""
        out = np.full((len(self.counts), max(self.width, 1)), fill, dtype=np.asarray(values).dtype)
        out[self.pix, self.slot] = values
        return out


@dataclass
class RenderResult:
    """Forward outputs; also keeps the per-entry state needed by :func:`backward`."""

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), standard compositing
    accumulated_alpha: np.ndarray  # (H, W)
    depth_enhanced: np.ndarray | None
    omega: float | None
    # cache
    scene: object
    cam: object
    proj: object
    entries: Entries
    G: np.ndarray  # (E,)
    dx: np.ndarray
    dy: np.ndarray
    alpha: np.ndarray  # (E,) clamped per-contribution alpha
    clamped: np.ndarray  # (E,) bool
    trans: np.ndarray  # (E,) transmittance before each entry
    final_trans: np.ndarray  # (P,)
    color_eff: np.ndarray  # (N, 3) colors clamped to [0, 1]

    @property
    def slot_prim(self):
        """``(pixels, width)`` table of primitive indices, -1 for padding."""
        return self.entries.padded(self.entries.prim, fill=-1)

    def signature(self):
        """Discrete structure of the forward pass (coverage, clamps, order).

        Two evaluations with equal signatures lie on the same smooth branch.
        """
        color_in = (self.scene.color >= 0) & (self.scene.color <= 1)
        e = self.entries
        return (e.pix.tobytes(), e.prim.tobytes(), self.clamped.tobytes(), color_in.tobytes(),
                self.proj.valid.tobytes())


def _pack(scene, cam, proj, cutoff_sigma):
    """Build the depth-ordered flat list of footprint entries."""
    H, W = cam.resolution
    valid = proj.valid
    order = np.lexsort((np.arange(len(scene)), proj.view_depth))
    order = order[valid[order]]

    m = proj.mean2d[order]
    cov = proj.cov2d[order]
    if cutoff_sigma is None:
        x0 = np.zeros(len(order), dtype=np.int64)
        y0 = np.zeros(len(order), dtype=np.int64)
        x1 = np.full(len(order), W - 1, dtype=np.int64)
        y1 = np.full(len(order), H - 1, dtype=np.int64)
    else:
        rx = cutoff_sigma * np.sqrt(cov[:, 0, 0])
        ry = cutoff_sigma * np.sqrt(cov[:, 1, 1])
        x0 = np.maximum(np.ceil(m[:, 0] - rx), 0).astype(np.int64)
        x1 = np.minimum(np.floor(m[:, 0] + rx), W - 1).astype(np.int64)
        y0 = np.maximum(np.ceil(m[:, 1] - ry), 0).astype(np.int64)
        y1 = np.minimum(np.floor(m[:, 1] + ry), H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    cnt = nx * ny
    total = int(cnt.sum())

    starts = np.cumsum(cnt) - cnt
    which = np.repeat(np.arange(len(order)), cnt)
    local = np.arange(total) - starts[which]
    nxw = nx[which]
    ex = x0[which] + local % np.maximum(nxw, 1)
    ey = y0[which] + local // np.maximum(nxw, 1)
    pix = ey * W + ex

    # entries are generated in depth order; a stable sort by pixel keeps it per pixel
    srt = np.argsort(pix, kind="stable")
    pix = pix[srt]
    counts = np.bincount(pix, minlength=H * W)
    first = np.cumsum(counts) - counts
    slot = np.arange(total) - first[pix]
    return Entries(pix, order[which[srt]], slot, counts, first)


def _segment_exclusive_cumsum(values, e):
    """Per pixel, the sum of ``values`` over the earlier entries of that pixel."""
    cs = np.cumsum(values)
    excl = cs - values
    return excl - excl[e.first[e.pix]]


def _segment_exclusive_suffix(values, e):
    """Per pixel, the sum of ``values`` over the later entries of that pixel."""
    rcs = np.append(np.cumsum(values[::-1])[::-1], 0.0)
    end = e.first[e.pix] + e.counts[e.pix]
    return rcs[1:] - rcs[end]


def rasterize(scene, cam, omega=None, cutoff_sigma=CUTOFF_SIGMA, lowpass=LOWPASS, z_near=Z_NEAR):
    """Render color, standard depth and (if ``omega`` is given) enhanced-opacity depth."""
    if omega is not None and not (0.0 < omega < 1.0):
        raise InvalidParameterError(f"omega must lie in (0, 1), got {omega}")
    scene.validate()
    H, W = cam.resolution
    P = H * W
    proj = project_gaussians(scene, cam, lowpass, z_near)
    e = _pack(scene, cam, proj, cutoff_sigma)
    prim = e.prim

    A, B, C = (c[prim] for c in conic(proj.cov2d))
    py, px = np.divmod(e.pix, W)
    dx = px - proj.mean2d[:, 0][prim]
    dy = py - proj.mean2d[:, 1][prim]
    G = np.exp(-0.5 * (A * dx * dx + 2 * B * dx * dy + C * dy * dy))

    raw = scene.opacity[prim] * G
    clamped = raw > ALPHA_MAX
    alpha = np.where(clamped, ALPHA_MAX, raw)
    log_keep = np.log1p(-alpha)
    trans = np.exp(_segment_exclusive_cumsum(log_keep, e))
    final_trans = np.exp(np.bincount(e.pix, weights=log_keep, minlength=P))
    w = alpha * trans

    color_eff = np.clip(scene.color, 0.0, 1.0)
    color = np.stack([np.bincount(e.pix, weights=w * color_eff[prim, c], minlength=P) for c in range(3)], axis=1)
    color += final_trans[:, None] * scene.background
    dist = proj.view_depth[prim]
    depth = np.bincount(e.pix, weights=w * dist, minlength=P)
    acc = 1.0 - final_trans

    depth_enh = None
    if omega is not None:
        iota = -np.log(1.0 - omega)
        rank_w = omega * np.exp(-iota * e.slot)
        depth_enh = np.bincount(e.pix, weights=rank_w * G * dist, minlength=P).reshape(H, W)

    return RenderResult(
        color=color.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        accumulated_alpha=acc.reshape(H, W),
        depth_enhanced=depth_enh,
        omega=omega,
        scene=scene,
        cam=cam,
        proj=proj,
        entries=e,
        G=G,
        dx=dx,
        dy=dy,
        alpha=alpha,
        clamped=clamped,
        trans=trans,
        final_trans=final_trans,
        color_eff=color_eff,
    )


def backward(res, grad_color=None, grad_depth=None, grad_depth_enhanced=None):
    """Exact VJP of :func:`rasterize` outputs w.r.t. the scene parameters.

    The depth ordering and footprint coverage are held fixed at the evaluated point.
    """
    scene, cam, proj, e = res.scene, res.cam, res.proj, res.entries
    H, W = cam.resolution
    P = H * W
    n = len(scene)
    prim, pix = e.prim, e.pix

    def scatter(values):
        return np.bincount(prim, weights=values, minlength=n)

    gC = np.zeros((P, 3)) if grad_color is None else _checked(grad_color, (H, W, 3), "grad_color").reshape(P, 3)
    gD = np.zeros(P) if grad_depth is None else _checked(grad_depth, (H, W), "grad_depth").reshape(P)
    if grad_depth_enhanced is not None and res.depth_enhanced is None:
        raise ValueError("render has no enhanced depth; pass omega to rasterize")

    dist = proj.view_depth[prim]
    w = res.alpha * res.trans
    gC_e = gC[pix]

    # per-entry scalar value seen by the compositing fold
    val = np.einsum("ec,ec->e", res.color_eff[prim], gC_e) + dist * gD[pix]
    val_bg = gC @ scene.background
    suffix = _segment_exclusive_suffix(val * w, e) + (val_bg * res.final_trans)[pix]
    g_alpha = val * res.trans - suffix / (1.0 - res.alpha)
    g_alpha = np.where(res.clamped, 0.0, g_alpha)

    g_G = g_alpha * scene.opacity[prim]
    g_opacity = scatter(g_alpha * res.G)

    g_color_eff = np.stack([scatter(w * gC_e[:, c]) for c in range(3)], axis=1)
    inside = (scene.color >= 0) & (scene.color <= 1)
    g_color = np.where(inside, g_color_eff, 0.0)

    g_dist = w * gD[pix]
    if grad_depth_enhanced is not None:
        gDe = _checked(grad_depth_enhanced, (H, W), "grad_depth_enhanced").reshape(P)[pix]
        iota = -np.log(1.0 - res.omega)
        rank_w = res.omega * np.exp(-iota * e.slot)
        g_G = g_G + rank_w * dist * gDe
        g_dist = g_dist + rank_w * res.G * gDe
    g_depth = scatter(g_dist)

    # through the Gaussian footprint: G = exp(-p), p = 0.5 (A dx^2 + 2B dx dy + C dy^2)
    g_p = -res.G * g_G
    dx, dy = res.dx, res.dy
    Ai, Bi, Ci = conic(proj.cov2d)
    A, B, C = Ai[prim], Bi[prim], Ci[prim]
    gA = scatter(0.5 * g_p * dx * dx)
    gB = scatter(g_p * dx * dy)
    gCc = scatter(0.5 * g_p * dy * dy)
    g_mean = np.stack([scatter(-g_p * (A * dx + B * dy)), scatter(-g_p * (B * dx + C * dy))], axis=1)

    inv = np.stack([np.stack([Ai, Bi], -1), np.stack([Bi, Ci], -1)], -2)
    g_inv = np.stack([np.stack([gA, gB / 2], -1), np.stack([gB / 2, gCc], -1)], -2)
    g_cov2d = -inv @ g_inv @ inv

    g_mu, g_scale, g_rot = project_vjp(scene, cam, proj, g_mean, g_cov2d, g_depth)
    valid = proj.valid
    return RenderGradients(
        mu=g_mu,
        scale=np.where(valid[:, None], g_scale, 0.0),
        rotation=g_rot,
        opacity=np.where(valid, g_opacity, 0.0),
        color=np.where(valid[:, None], g_color, 0.0),
    )


def _checked(arr, shape, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} is not finite")
    return arr


# ---------------------------------------------------------------------------
# Convenience wrappers with the single-output signatures
# ---------------------------------------------------------------------------


def render_color(scene, cam, **kw):
    return rasterize(scene, cam, **kw).color


def render_depth(scene, cam, **kw):
    """Standard composited depth; returns ``(depth, accumulated_alpha)``."""
    res = rasterize(scene, cam, **kw)
    return res.depth, res.accumulated_alpha


def render_depth_enhanced(scene, cam, omega=DEFAULT_OMEGA, **kw):
    return rasterize(scene, cam, omega=omega, **kw).depth_enhanced


def render_vjp(scene, cam, grad_color, grad_depth, depth_mode="standard", omega=DEFAULT_OMEGA, **kw):
    """Gradients of ``<grad_color, C> + <grad_depth, D>`` w.r.t. scene parameters.

    ``depth_mode`` selects whether ``grad_depth`` pairs with the standard
    composited depth or the enhanced-opacity depth.
    """
    if depth_mode == "standard":
        res = rasterize(scene, cam, **kw)
        return backward(res, grad_color, grad_depth)
    if depth_mode == "enhanced":
        res = rasterize(scene, cam, omega=omega, **kw)
        return backward(res, grad_color, None, grad_depth)
    raise ValueError(f"unknown depth_mode {depth_mode!r}")
