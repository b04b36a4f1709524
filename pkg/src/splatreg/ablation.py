"""Variant x scene x seed ablation over synthetic scenes with known geometry.

Each cell trains one weight configuration from the scene's uninformed
initialization and scores it on the held-out views. Cells are independent
and may run in worker processes (``SPLATREG_JOBS``); the report is always
assembled in variant, scene, seed order.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .photometric import LossWeights, psnr, ssim
from .raster import rasterize
from .synthetic import SyntheticSceneSpec, corrupt_depth, generate_scene, init_scene
from .trainer import TrainConfig, View, train

log = logging.getLogger(__name__)

JOBS_ENV = "SPLATREG_JOBS"

_OFF = {"gamma": 0.0, "eta": 0.0, "beta": 0.0, "phi": 0.0}
DEFAULT_VARIANTS = {
    "None": dict(_OFF),
    "+depth": {"beta": 0.0, "phi": 0.0},
    "+edge": {"gamma": 0.0, "eta": 0.0, "phi": 0.0},
    "+tv": {"gamma": 0.0, "eta": 0.0, "beta": 0.0},
    "Full": {},
}


def default_scenes():
    """Two desk-scale scenes: piecewise-constant objects in front of a flat backdrop dome."""
    common = dict(count=200, backdrop_count=150, backdrop_style="flat", color_jitter=0.0,
                  ring_count=16, holdout_every=4, resolution=(64, 64))
    return [
        SyntheticSceneSpec(name="tabletop", objects=4, **common),
        SyntheticSceneSpec(name="cluster", objects=3, ring_elevation_deg=30.0, backdrop_color=(0.6, 0.55, 0.45),
                           **common),
    ]


@dataclass
class AblationSpec:
    variants: dict = field(default_factory=lambda: dict(DEFAULT_VARIANTS))
    scenes: list = field(default_factory=default_scenes)
    seeds: list = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        if isinstance(self.variants, (list, tuple)):
            self.variants = {name: dict(DEFAULT_VARIANTS[name]) for name in self.variants}
        self.scenes = [s if isinstance(s, SyntheticSceneSpec) else SyntheticSceneSpec(**s) for s in self.scenes]
        self.seeds = [int(s) for s in self.seeds]
        if not self.variants or not self.scenes or not self.seeds:
            raise ValueError("ablation needs at least one variant, scene and seed")
        names = [s.name for s in self.scenes]
        if len(set(names)) != len(names):
            raise ValueError(f"scene names must be unique, got {names}")
        for s in self.scenes:
            if not s.holdout_every or s.holdout_every > s.ring_count:
                raise ValueError(f"scene {s.name!r} has no holdout view")

    @classmethod
    def smallest(cls):
        """One tiny scene, one seed, two variants: a smoke-test configuration."""
        scene = SyntheticSceneSpec(name="tiny", count=12, objects=2, ring_count=4, holdout_every=4,
                                   resolution=(24, 24))
        return cls(variants={k: DEFAULT_VARIANTS[k] for k in ("None", "Full")}, scenes=[scene], seeds=[0])

    def to_dict(self):
        return {"variants": self.variants, "scenes": [s.to_dict() for s in self.scenes], "seeds": self.seeds}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CellResult:
    variant: str
    scene: str
    seed: int
    psnr: float | None = None
    ssim: float | None = None
    depth_rmse: float | None = None
    train_psnr: float | None = None
    seconds: float = 0.0
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


def aligned_depth_rmse(pred, gt, mask=None):
    """RMSE after scaling ``pred`` by the ratio of medians over ``mask`` (default: gt > 0)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = gt > 0 if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("no pixels to compare")
    med = np.median(pred[m])
    s = np.median(gt[m]) / med if med > 0 else 1.0
    return float(np.sqrt(np.mean((s * pred[m] - gt[m]) ** 2)))


def make_views(data, spec, seed):
    """Training views with pseudo-prior depth ``a D + b + noise`` (noise seeded per view)."""
    views = []
    for k in data.train_idx:
        prior = corrupt_depth(data.depths[k], spec.prior_a, spec.prior_b, spec.prior_sigma, seed * 1000 + k)
        views.append(View(data.cameras[k], data.images[k], prior, data.depths[k]))
    return views


def evaluate(scene, data):
    ps, ss, rm = [], [], []
    for k in data.holdout_idx:
        res = rasterize(scene, data.cameras[k])
        ps.append(psnr(res.color, data.images[k]))
        ss.append(ssim(res.color, data.images[k]) if min(res.color.shape[:2]) >= 11 else float("nan"))
        rm.append(aligned_depth_rmse(res.depth, data.depths[k]))
    return float(np.mean(ps)), float(np.mean(ss)), float(np.mean(rm))


def run_cell(scene_spec, variant, overrides, seed, config):
    t0 = time.perf_counter()
    cell = CellResult(variant, scene_spec.name, seed)
    try:
        data = generate_scene(scene_spec, seed)
        views = make_views(data, scene_spec, seed)
        weights = dataclasses.replace(config.weights, **overrides)
        cfg = dataclasses.replace(config, weights=weights, seed=seed)
        scene, history = train(views, init_scene(scene_spec, seed), cfg)
        cell.psnr, cell.ssim, cell.depth_rmse = evaluate(scene, data)
        tail = [r.psnr for r in history[-len(views):]]
        cell.train_psnr = float(np.mean(tail)) if tail else None
    except Exception as exc:  # a failed cell must not sink the table
        log.warning("cell %s/%s/seed %d failed: %s", variant, scene_spec.name, seed, exc)
        cell.error = f"{type(exc).__name__}: {exc}"
    cell.seconds = time.perf_counter() - t0
    return cell


def _run_packed(args):
    return run_cell(*args)


def jobs_from_env(default=1):
    raw = os.environ.get(JOBS_ENV)
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{JOBS_ENV} must be an integer, got {raw!r}") from None


@dataclass
class AblationReport:
    cells: list
    variants: list
    scenes: list
    seconds: float = 0.0

    def rows(self):
        """One row per (variant, scene) with seed-averaged metrics over successful cells."""
        out = []
        for v in self.variants:
            for s in self.scenes:
                cs = [c for c in self.cells if c.variant == v and c.scene == s]
                ok = [c for c in cs if c.ok]
                row = {"variant": v, "scene": s, "runs": len(ok), "failed": len(cs) - len(ok)}
                for key in ("psnr", "ssim", "depth_rmse"):
                    row[key] = float(np.mean([getattr(c, key) for c in ok])) if ok else None
                out.append(row)
        return out

    def variant_means(self, key="psnr"):
        """Per variant, the mean of ``key`` over scenes and seeds (successful cells only)."""
        out = {}
        for v in self.variants:
            vals = [getattr(c, key) for c in self.cells if c.variant == v and c.ok]
            out[v] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self):
        return {"rows": self.rows(), "cells": [dataclasses.asdict(c) for c in self.cells],
                "seconds": self.seconds}


def run_ablation(spec, config=None, jobs=None):
    config = config or TrainConfig()
    jobs = jobs_from_env() if jobs is None else jobs
    tasks = [(sc, v, spec.variants[v], seed, config) for v in spec.variants for sc in spec.scenes for seed in spec.seeds]
    t0 = time.perf_counter()
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_packed, tasks))
    else:
        cells = [run_cell(*t) for t in tasks]
    return AblationReport(cells, list(spec.variants), [s.name for s in spec.scenes], time.perf_counter() - t0)


def check_ordering(report, margin_db=0.1, min_rmse_gain=0.10, full="Full", baseline="None"):
    """Mean holdout PSNR ordering Full >= each single-term variant >= None - margin,
    and Full's aligned depth RMSE at least ``min_rmse_gain`` below None's."""
    p = report.variant_means("psnr")
    r = report.variant_means("depth_rmse")
    singles = [v for v in report.variants if v not in (full, baseline)]
    checks = {}
    for v in singles:
        checks[f"{full} >= {v}"] = p[full] is not None and p[v] is not None and p[full] >= p[v]
        checks[f"{v} >= {baseline} - {margin_db} dB"] = (p[v] is not None and p[baseline] is not None
                                                          and p[v] >= p[baseline] - margin_db)
    gain = None
    if r[full] is not None and r[baseline]:
        gain = 1.0 - r[full] / r[baseline]
    checks[f"{full} depth RMSE >= {min_rmse_gain:.0%} below {baseline}"] = gain is not None and gain >= min_rmse_gain
    return checks, {"psnr": p, "depth_rmse": r, "rmse_gain": gain}
