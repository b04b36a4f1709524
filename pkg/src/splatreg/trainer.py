"""Objective assembly, Adam training loop and finite-difference gradient checks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import depth as depthmod
from .edges import canny, edge_loss, non_edge_mask
from .gaussians import Scene
from .photometric import LossWeights, color_loss, psnr
from .raster import CUTOFF_SIGMA, RenderGradients, backward, rasterize
from .tv import gradient_masks, tv_loss, tv_signature

log = logging.getLogger(__name__)

GROUPS = ("mu", "scale", "rotation", "opacity", "color")
DEFAULT_LR = {"mu": 1.6e-3, "scale": 5e-3, "rotation": 1e-3, "opacity": 5e-2, "color": 2.5e-3}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 1500
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    weights: LossWeights = field(default_factory=LossWeights)
    depth_every: int = 5
    patch_range: tuple = (5, 20)
    depth_mode: str = "standard"
    seed: int = 0
    prune_opacity_below: float | None = None
    prune_every: int = 500
    edge_every: int = 1
    tv_every: int = 1
    stop_stats: bool = False
    cutoff_sigma: float | None = CUTOFF_SIGMA

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.lr = {**DEFAULT_LR, **self.lr}
        self.patch_range = tuple(int(p) for p in self.patch_range)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.depth_every < 1 or self.edge_every < 1 or self.tv_every < 1:
            raise ValueError("term schedules must be >= 1")
        lo, hi = self.patch_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad patch_range {self.patch_range}")
        if self.depth_mode not in ("standard", "enhanced"):
            raise ValueError(f"unknown depth_mode {self.depth_mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["patch_range"] = list(self.patch_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class View:
    """A training or evaluation view with lazily cached ground-truth derived masks."""

    cam: object
    image: np.ndarray
    prior_depth: np.ndarray | None = None
    gt_depth: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def non_edge(self):
        if "m" not in self._cache:
            self._cache["m"] = non_edge_mask(canny(self.image))
        return self._cache["m"]

    def tv_masks(self, tau_edge):
        key = ("tv", tau_edge)
        if key not in self._cache:
            self._cache[key] = gradient_masks(self.image, tau_edge)
        return self._cache[key]


@dataclass
class LossReport:
    color: float
    depth: float | None
    edge: float
    tv: float
    total: float
    patch_size: int | None = None
    iteration: int | None = None
    psnr: float | None = None
    view: int | None = None
    grads: RenderGradients | None = field(default=None, repr=False)
    signature: bytes | None = field(default=None, repr=False)

    def row(self):
        return {
            "iteration": self.iteration,
            "view": self.view,
            "L_color": self.color,
            "L_depth": self.depth,
            "L_edge": self.edge,
            "L_tv": self.tv,
            "total": self.total,
            "patch_size": self.patch_size,
            "PSNR": self.psnr,
        }


def _as_view(cam, gt_image, prior_depth):
    return View(cam, np.asarray(gt_image, dtype=np.float64), prior_depth)


def total_loss(scene, cam, gt_image, prior_depth, weights, grid, apply_depth, *, depth_mode="standard",
               apply_edge=True, apply_tv=True, stop_stats=False, cutoff_sigma=CUTOFF_SIGMA, view=None,
               with_grad=True, with_signature=False):
    """Render ``scene`` through ``cam`` and evaluate the weighted objective.

    ``L = L_color + L_depth + beta * L_edge + phi * L_tv``. Terms with zero
    weight (or switched off) are reported as 0.0 and not evaluated;
    ``L_depth`` is ``None`` when ``apply_depth`` is false.
    """
    view = view if view is not None else _as_view(cam, gt_image, prior_depth)
    gt = view.image
    H, W = cam.resolution
    if gt.shape != (H, W, 3):
        raise ValueError(f"gt image shape {gt.shape} does not match camera resolution {(H, W)}")
    w = weights
    use_depth = apply_depth and (w.gamma > 0 or w.eta > 0)
    if apply_depth:
        if view.prior_depth is None:
            raise ValueError("depth supervision requested without a prior depth map")
        if view.prior_depth.shape != (H, W):
            raise ValueError(f"prior depth shape {view.prior_depth.shape} does not match {(H, W)}")
    use_edge = apply_edge and w.beta > 0
    use_tv = apply_tv and w.phi > 0
    enhanced = use_depth and depth_mode == "enhanced"

    res = rasterize(scene, cam, omega=w.omega if enhanced else None, cutoff_sigma=cutoff_sigma)
    pred = res.color
    sig = [res.signature()] if with_signature else None

    L_color, g_color = color_loss(pred, gt, w.lambda_dssim)
    if sig is not None:
        sig.append(np.sign(pred - gt).astype(np.int8).tobytes())

    g_depth = np.zeros((H, W))
    g_depth_enh = None
    L_depth = None
    if apply_depth:
        L_depth = 0.0
    if use_depth:
        target = res.depth_enhanced if enhanced else res.depth
        L_depth, g = depthmod.depth_loss(target, view.prior_depth, grid, w.gamma, w.eta, w.tolerance, w.delta,
                                         stop_stats=stop_stats)
        if enhanced:
            g_depth_enh = g
        else:
            g_depth += g
        if sig is not None:
            sig.append(depthmod.depth_loss_signature(target, view.prior_depth, grid, w.tolerance, w.delta))

    L_edge = 0.0
    if use_edge:
        L_edge, g = edge_loss(res.depth, view.non_edge(), w.epsilon)
        g_depth += w.beta * g

    L_tv = 0.0
    if use_tv:
        L_tv, g = tv_loss(pred, gt, w.tau_edge, w.tau_smooth, masks=view.tv_masks(w.tau_edge))
        g_color = g_color + w.phi * g
        if sig is not None:
            sig.append(tv_signature(pred, w.tau_smooth))

    total = L_color + (L_depth or 0.0) + w.beta * L_edge + w.phi * L_tv
    for name, value in (("color", L_color), ("depth", L_depth), ("edge", L_edge), ("tv", L_tv)):
        if value is not None and not np.isfinite(value):
            raise TrainingError(f"non-finite L_{name} = {value}")
    grads = None
    if with_grad:
        grads = backward(res, g_color, g_depth, g_depth_enh)
    return LossReport(
        color=L_color,
        depth=L_depth,
        edge=L_edge,
        tv=L_tv,
        total=total,
        patch_size=grid.patch_size if apply_depth else None,
        psnr=psnr(pred, gt),
        grads=grads,
        signature=b"".join(s if isinstance(s, bytes) else repr(s).encode() for s in sig) if sig else None,
    )


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            if lr[k] == 0:
                continue
            params[k] = params[k] - lr[k] * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def keep(self, mask):
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][mask]


@dataclass
class TrainState:
    """Optimizer-space parameters (log-scale, logit-opacity) plus bookkeeping."""

    params: dict
    background: np.ndarray
    iteration: int = 0
    history: list = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    optimizer: Adam = field(default_factory=Adam)

    @classmethod
    def from_scene(cls, scene, seed=0):
        params = {
            "mu": scene.mu.copy(),
            "scale": np.log(scene.scale),
            "rotation": scene.rotation / np.linalg.norm(scene.rotation, axis=1, keepdims=True),
            "opacity": _logit(scene.opacity),
            "color": scene.color.copy(),
        }
        return cls(params=params, background=scene.background.copy(), rng=np.random.default_rng(seed))

    @property
    def scene(self):
        p = self.params
        return Scene(p["mu"], np.exp(p["scale"]), p["rotation"], _sigmoid(p["opacity"]), p["color"],
                     self.background)


def train_step(state, view, config, view_index=None):
    """One Adam update on a single view. Mutates and returns ``state``."""
    it = state.iteration + 1
    w = config.weights
    apply_depth = it % config.depth_every == 0 and (w.gamma > 0 or w.eta > 0)
    patch = int(state.rng.integers(config.patch_range[0], config.patch_range[1], endpoint=True)) \
        if apply_depth else None
    grid = depthmod.PatchGrid(patch if patch else config.patch_range[0])
    scene = state.scene

    try:
        report = total_loss(scene, view.cam, view.image, view.prior_depth, w, grid, apply_depth,
                            depth_mode=config.depth_mode, apply_edge=it % config.edge_every == 0,
                            apply_tv=it % config.tv_every == 0, stop_stats=config.stop_stats,
                            cutoff_sigma=config.cutoff_sigma, view=view)
    except TrainingError as exc:
        raise TrainingError(f"iteration {it}: {exc}") from None
    if not np.isfinite(report.total):
        raise TrainingError(f"iteration {it}: non-finite total loss = {report.total}")

    g = report.grads
    sig = _sigmoid(state.params["opacity"])
    grads = {
        "mu": g.mu,
        "scale": g.scale * scene.scale,
        "rotation": g.rotation,
        "opacity": g.opacity * sig * (1 - sig),
        "color": g.color,
    }
    state.optimizer.step(state.params, grads, config.lr)
    q = state.params["rotation"]
    state.params["rotation"] = q / np.linalg.norm(q, axis=1, keepdims=True)

    if config.prune_opacity_below is not None and it % config.prune_every == 0:
        keep = _sigmoid(state.params["opacity"]) >= config.prune_opacity_below
        if 0 < keep.sum() < len(keep):
            state.params = {k: v[keep] for k, v in state.params.items()}
            state.optimizer.keep(keep)

    report.iteration = it
    report.view = view_index
    report.grads = None
    state.history.append(report)
    state.iteration = it
    return state


def train(views, init_scene, config, callback=None):
    """Round-robin training over ``views`` (order shuffled once with the seed)."""
    if not views:
        raise ValueError("need at least one view")
    state = TrainState.from_scene(init_scene, seed=config.seed)
    order = np.random.default_rng(config.seed + 7919).permutation(len(views))
    for k in range(config.iterations):
        vi = int(order[k % len(views)])
        train_step(state, views[vi], config, view_index=vi)
        if callback is not None:
            callback(state)
    return state.scene, state.history


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

TERMS = ("color", "depth", "edge", "tv", "total")


def isolate(weights, term):
    """Copy of ``weights`` with the regularizers switched off, for the color-only term."""
    if term != "color":
        return weights
    return LossWeights(**{**asdict(weights), "gamma": 0.0, "eta": 0.0, "beta": 0.0, "phi": 0.0})


def _term_value(rep, term):
    if term == "color":
        return rep.color
    if term == "depth":
        return rep.depth
    if term == "edge":
        return rep.edge
    if term == "tv":
        return rep.tv
    return rep.total


def check_gradients(scene, cam, gt, prior, weights, h=1e-4, patch_size=4, terms=TERMS,
                    depth_mode="standard", cutoff_sigma=CUTOFF_SIGMA, floor=1e-6, rtol=1e-3):
    """Compare analytic gradients with central differences for each loss term.

    Each term is isolated (others switched off; for ``color`` the L1 part is
    kept since it cannot be removed). Coordinates whose perturbation changes
    the discrete structure (coverage, clamps, dead zones, L1 signs) are
    skipped as kink neighborhoods. Returns ``{term: {...}}`` with the maximum
    error ``|a - f| / max(|a|, |f|, floor / rtol)`` and counts.
    """
    grid = depthmod.PatchGrid(patch_size)
    view = View(cam, np.asarray(gt, dtype=np.float64), prior)
    kw = dict(depth_mode=depth_mode, cutoff_sigma=cutoff_sigma)

    def evaluate(s, term, with_grad):
        if term in ("color", "total"):
            return total_loss(s, cam, gt, prior, isolate(weights, term), grid, term == "total", view=view,
                              with_grad=with_grad, with_signature=True, **kw)
        return _isolated_eval(s, cam, weights, grid, term, view, with_grad=with_grad, **kw)

    report = {}
    for term in terms:
        base = evaluate(scene, term, True)
        analytic = base.grads
        worst, checked, skipped = 0.0, 0, 0
        for name in GROUPS:
            arr = getattr(scene, name)
            ga = getattr(analytic, name)
            for i in np.ndindex(arr.shape):
                step = h * max(1.0, abs(arr[i]))
                vals = []
                for sgn in (1, -1):
                    s = scene.copy()
                    getattr(s, name)[i] += sgn * step
                    vals.append(evaluate(s, term, False))
                if any(r.signature != base.signature for r in vals):
                    skipped += 1
                    continue
                fd = (_term_value(vals[0], term) - _term_value(vals[1], term)) / (2 * step)
                err = abs(ga[i] - fd) / max(abs(ga[i]), abs(fd), floor / rtol)
                worst = max(worst, err)
                checked += 1
        grad_norm = float(np.sqrt(sum(np.sum(x * x) for x in analytic)))
        report[term] = {"max_rel_err": float(worst), "checked": checked, "skipped": skipped, "grad_norm": grad_norm,
                        "passed": bool(worst <= rtol)}
    return report


def _isolated_eval(scene, cam, w, grid, term, view, with_grad, depth_mode="standard", cutoff_sigma=CUTOFF_SIGMA):
    """One weighted regularizer (``L_depth``, ``beta L_edge`` or ``phi L_tv``) through the renderer."""
    enhanced = term == "depth" and depth_mode == "enhanced"
    res = rasterize(scene, cam, omega=w.omega if enhanced else None, cutoff_sigma=cutoff_sigma)
    H, W = cam.resolution
    sig = [repr(res.signature()).encode()]
    g_color = np.zeros((H, W, 3))
    g_depth = np.zeros((H, W))
    g_enh = None
    if term == "depth":
        target = res.depth_enhanced if enhanced else res.depth
        value, g = depthmod.depth_loss(target, view.prior_depth, grid, w.gamma, w.eta, w.tolerance, w.delta)
        sig.append(depthmod.depth_loss_signature(target, view.prior_depth, grid, w.tolerance, w.delta))
        if enhanced:
            g_enh = g
        else:
            g_depth = g
        rep = LossReport(0.0, value, 0.0, 0.0, value)
    elif term == "edge":
        value, g = edge_loss(res.depth, view.non_edge(), w.epsilon)
        g_depth = w.beta * g
        rep = LossReport(0.0, None, w.beta * value, 0.0, w.beta * value)
    elif term == "tv":
        value, g = tv_loss(res.color, view.image, w.tau_edge, w.tau_smooth, masks=view.tv_masks(w.tau_edge))
        g_color = w.phi * g
        sig.append(tv_signature(res.color, w.tau_smooth))
        rep = LossReport(0.0, None, 0.0, w.phi * value, w.phi * value)
    else:
        raise ValueError(f"unknown term {term!r}")
    rep.signature = b"".join(sig)
    if with_grad:
        rep.grads = backward(res, g_color, g_depth, g_enh)
    return rep
