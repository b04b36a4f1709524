"""Synthetic ground-truth scenes, camera rings and pseudo-prior depth maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .gaussians import Camera, Scene
from .raster import rasterize

DEFAULT_PALETTE = (
    (0.85, 0.25, 0.2),
    (0.2, 0.55, 0.85),
    (0.95, 0.8, 0.25),
    (0.3, 0.75, 0.35),
    (0.6, 0.35, 0.7),
)


@dataclass
class SyntheticSceneSpec:
    """Clustered primitives on a few ellipsoidal shells, viewed from a camera ring.

    ``prior_a``, ``prior_b`` and ``prior_sigma`` define the pseudo-prior depth
    ``a * D + b + N(0, sigma)``.
    """

    count: int = 200
    extent: float = 1.0
    objects: int = 4
    palette: tuple = DEFAULT_PALETTE
    background: tuple = (0.05, 0.05, 0.08)
    ring_count: int = 16
    ring_radius: float = 4.0
    ring_elevation_deg: float = 20.0
    backdrop_count: int = 0
    backdrop_radius: float = 7.0
    backdrop_bands: int = 24
    backdrop_style: str = "checker"
    backdrop_color: tuple = (0.45, 0.5, 0.6)
    color_jitter: float = 0.03
    holdout_every: int = 4
    resolution: tuple = (64, 64)
    fov_deg: float = 45.0
    prior_a: float = 0.5
    prior_b: float = 1.0
    prior_sigma: float = 0.02
    name: str = "scene"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.ring_radius <= self.extent:
            raise ValueError("ring_radius must exceed extent")
        if self.backdrop_count and self.backdrop_radius <= self.ring_radius:
            raise ValueError("backdrop_radius must exceed ring_radius")
        if self.backdrop_style not in ("checker", "smooth", "flat"):
            raise ValueError(f"unknown backdrop_style {self.backdrop_style!r}")
        self.palette = tuple(tuple(c) for c in self.palette)
        self.background = tuple(self.background)
        self.backdrop_color = tuple(self.backdrop_color)
        self.resolution = tuple(self.resolution)

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticData:
    scene: Scene
    cameras: list
    images: list
    depths: list
    train_idx: list = field(default_factory=list)
    holdout_idx: list = field(default_factory=list)


def camera_ring(spec, offset_deg=0.0):
    cams = []
    elev = np.radians(spec.ring_elevation_deg)
    for k in range(spec.ring_count):
        az = np.radians(offset_deg) + 2 * np.pi * k / spec.ring_count
        eye = spec.ring_radius * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), resolution=spec.resolution, fov_deg=spec.fov_deg))
    return cams


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def sample_scene(spec, rng):
    """Primitives scattered over ``spec.objects`` ellipsoidal shells, one palette color each."""
    n_obj = max(1, min(spec.objects, spec.count))
    centers = rng.uniform(-0.55, 0.55, (n_obj, 3)) * spec.extent
    radii = rng.uniform(0.2, 0.4, (n_obj, 3)) * spec.extent
    which = np.arange(spec.count) % n_obj
    dirs = rng.normal(size=(spec.count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    mu = centers[which] + dirs * radii[which]
    palette = np.asarray(spec.palette, dtype=np.float64)
    base = palette[rng.permutation(len(palette))[:n_obj] % len(palette)] if n_obj <= len(palette) \
        else palette[rng.integers(0, len(palette), n_obj)]
    color = np.clip(base[which] + rng.normal(0, spec.color_jitter, (spec.count, 3)), 0.0, 1.0)
    mean_r = radii.mean(axis=1)[which]
    shell_density = np.sqrt(4 * np.pi * mean_r**2 / max(spec.count / n_obj, 1))
    scale = shell_density[:, None] * rng.uniform(0.5, 1.0, (spec.count, 3))
    scale[:, 2] *= 0.35
    return Scene(mu, scale, _random_quats(rng, spec.count), rng.uniform(0.7, 0.95, spec.count), color,
                 spec.background)


def sample_backdrop(spec, rng):
    """Flat splats tiling a sphere around the ring.

    ``checker`` colors them in an azimuth x elevation checker of palette
    colors; ``smooth`` uses a low-contrast vertical gradient and ``flat`` the
    single ``backdrop_color``. Both leave the backdrop's distance nearly
    unconstrained by color.
    """
    n = spec.backdrop_count
    # Fibonacci sphere gives near-uniform coverage
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    az = np.pi * (1 + 5**0.5) * k + rng.uniform(0, 2 * np.pi)
    r = np.sqrt(1 - z * z)
    normal = np.stack([r * np.cos(az), r * np.sin(az), z], axis=1)
    mu = spec.backdrop_radius * normal
    spacing = spec.backdrop_radius * np.sqrt(4 * np.pi / n)
    scale = np.column_stack([np.full(n, 0.75 * spacing), np.full(n, 0.75 * spacing), np.full(n, 0.05 * spacing)])
    # rotate local z onto the sphere normal
    zaxis = np.array([0.0, 0.0, 1.0])
    axis = np.cross(zaxis, normal)
    s = np.linalg.norm(axis, axis=1)
    c = normal @ zaxis
    half = np.arctan2(s, c) / 2
    axis = np.where(s[:, None] > 1e-9, axis / np.maximum(s, 1e-12)[:, None], [1.0, 0.0, 0.0])
    rot = np.column_stack([np.cos(half), axis * np.sin(half)[:, None]])
    palette = np.asarray(spec.palette, dtype=np.float64)
    if spec.backdrop_style == "flat":
        color = np.tile(spec.backdrop_color, (n, 1))
    elif spec.backdrop_style == "smooth":
        t = ((z + 1) / 2)[:, None]
        color = (0.75 - 0.35 * t) * np.array([0.55, 0.6, 0.7]) + 0.05 * np.cos(az)[:, None]
    else:
        bands = ((np.mod(az, 2 * np.pi) / (2 * np.pi)) * spec.backdrop_bands).astype(int)
        rows = ((z + 1) / 2 * spec.backdrop_bands / 2).astype(int)
        tone = np.where((bands + rows) % 2 == 0, 1.0, 0.45)[:, None]
        color = palette[(bands // 2) % len(palette)] * tone
    color = np.clip(color, 0.0, 1.0)
    return Scene(mu, scale, rot, np.full(n, 0.95), color, spec.background)


def _concat(a, b):
    return Scene(np.vstack([a.mu, b.mu]), np.vstack([a.scale, b.scale]), np.vstack([a.rotation, b.rotation]),
                 np.concatenate([a.opacity, b.opacity]), np.vstack([a.color, b.color]), a.background)


def generate_scene(spec, seed):
    """Ground-truth scene plus every ring camera's rendered image and depth."""
    rng = np.random.default_rng(seed)
    scene = sample_scene(spec, rng)
    if spec.backdrop_count:
        scene = _concat(scene, sample_backdrop(spec, rng))
    cams = camera_ring(spec, offset_deg=float(rng.uniform(0, 360)))
    images, depths = [], []
    for cam in cams:
        res = rasterize(scene, cam)
        images.append(res.color)
        depths.append(res.depth)
    holdout = [k for k in range(len(cams)) if spec.holdout_every and k % spec.holdout_every == spec.holdout_every - 1]
    train = [k for k in range(len(cams)) if k not in holdout]
    if not holdout:
        raise ValueError("spec yields no holdout views")
    return SyntheticData(scene, cams, images, depths, train, holdout)


def corrupt_depth(gt_depth, a=1.0, b=0.0, sigma=0.0, seed=0):
    """``max(a * D + b + N(0, sigma), 0)`` on covered pixels; uncovered (zero) pixels pass through as b."""
    if a <= 0:
        raise ValueError("a must be positive")
    d = np.asarray(gt_depth, dtype=np.float64)
    out = a * d + b
    if sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, sigma, d.shape)
    return np.maximum(out, 0.0)


def init_scene(spec, seed, count=None):
    """Uninformed starting point: isotropic gray blobs, uniform in the object box plus
    (with a backdrop) a jittered shell around the backdrop radius."""
    rng = np.random.default_rng(seed)
    n = count or spec.count + spec.backdrop_count
    n_obj = min(n, spec.count)
    mu = rng.uniform(-0.8, 0.8, (n, 3)) * spec.extent
    scale = np.full((n, 3), 0.06 * spec.extent)
    if n > n_obj:
        m = n - n_obj
        dirs = rng.normal(size=(m, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radius = spec.backdrop_radius * rng.uniform(0.85, 1.15, m)
        mu[n_obj:] = dirs * radius[:, None]
        scale[n_obj:] = 0.5 * spec.backdrop_radius * np.sqrt(4 * np.pi / max(spec.backdrop_count, 1))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return Scene(mu, scale, rot, np.full(n, 0.5), rng.uniform(0.35, 0.65, (n, 3)), spec.background)
