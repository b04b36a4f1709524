"""Command-line entry points.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures
(unreadable input, invalid parameters, diverged training, failed checks).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .ablation import AblationSpec, check_ordering, make_views, run_ablation
from .ablation import evaluate as evaluate_holdout
from .edges import DEFAULT_HIGH, DEFAULT_LOW, canny
from .gaussians import Camera, Scene
from .photometric import LossWeights
from .raster import rasterize
from .synthetic import SyntheticData, SyntheticSceneSpec, corrupt_depth, generate_scene, init_scene
from .trainer import TERMS, TrainConfig, View, check_gradients, train

log = logging.getLogger("splatreg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# flag -> LossWeights field
WEIGHT_FLAGS = {
    "gamma": "gamma",
    "eta": "eta",
    "beta": "beta",
    "phi": "phi",
    "lambda": "lambda_dssim",
    "omega": "omega",
    "tau_edge": "tau_edge",
    "tau_smooth": "tau_smooth",
    "tolerance": "tolerance",
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p, out_dir=True):
    p.add_argument("--seed", type=int, default=0)
    if out_dir:
        p.add_argument("--out-dir", type=Path, default=Path("out"))


def _add_weights(p):
    g = p.add_argument_group("loss weights and schedule")
    g.add_argument("--config", type=Path, help="TrainConfig JSON; flags below override it")
    for flag in WEIGHT_FLAGS:
        g.add_argument("--" + flag.replace("_", "-"), dest=flag, type=float)
    g.add_argument("--patch-min", type=int)
    g.add_argument("--patch-max", type=int)
    g.add_argument("--depth-every", type=int)
    g.add_argument("--depth-mode", choices=("standard", "enhanced"))
    g.add_argument("--iterations", type=int)


def build_config(args):
    """TrainConfig from ``--config`` (if any) with the command-line overrides applied."""
    cfg = io.load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {f: getattr(args, flag) for flag, f in WEIGHT_FLAGS.items() if getattr(args, flag, None) is not None}
    weights = dataclasses.replace(cfg.weights, **overrides)
    lo, hi = cfg.patch_range
    lo = args.patch_min if getattr(args, "patch_min", None) is not None else lo
    hi = args.patch_max if getattr(args, "patch_max", None) is not None else hi
    changes = {"weights": weights, "patch_range": (lo, hi), "seed": args.seed}
    for name in ("depth_every", "depth_mode", "iterations"):
        if getattr(args, name, None) is not None:
            changes[name] = getattr(args, name)
    return dataclasses.replace(cfg, **changes)


def build_parser():
    p = Parser(prog="splatreg", description="Differentiable Gaussian splatting with depth and edge regularizers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    r = sub.add_parser("render", help="render a scene through a camera")
    r.add_argument("--scene", type=Path, required=True)
    r.add_argument("--camera", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True, help=".png or .pfm color output")
    r.add_argument("--depth", type=Path, help="optional .pfm depth output")
    r.add_argument("--enhanced-depth", type=Path, help="optional .pfm enhanced-opacity depth output")
    r.add_argument("--omega", type=float, default=LossWeights().omega)

    t = sub.add_parser("train", help="train on a dataset directory written by make-scene")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--init", type=Path, help="initial scene JSON (default: DATA/init.json)")
    t.add_argument("--checkpoint-every", type=int, default=500)
    _add_common(t)
    _add_weights(t)

    e = sub.add_parser("edges", help="edge mask of an image")
    e.add_argument("--image", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--low", type=float, default=DEFAULT_LOW)
    e.add_argument("--high", type=float, default=DEFAULT_HIGH)
    e.add_argument("--magnitude", type=Path, help="optional .pfm dump of the gradient magnitude")

    c = sub.add_parser("check-grad", help="finite-difference check of every loss term")
    c.add_argument("--primitives", type=int, default=4)
    c.add_argument("--size", type=int, default=16)
    c.add_argument("--step", type=float, default=1e-4)
    c.add_argument("--terms", nargs="+", choices=TERMS, default=list(TERMS))
    c.add_argument("--json", type=Path, help="write the report as JSON")
    _add_common(c, out_dir=False)
    _add_weights(c)

    a = sub.add_parser("ablate", help="variant x scene x seed ablation")
    a.add_argument("--spec", type=Path, help="AblationSpec JSON (default: the built-in desk-scale spec)")
    a.add_argument("--smallest", action="store_true", help="run the smallest smoke-test spec")
    a.add_argument("--jobs", type=int, help="worker processes (default: $SPLATREG_JOBS or 1)")
    _add_common(a)
    _add_weights(a)

    m = sub.add_parser("make-scene", help="generate a synthetic dataset directory")
    m.add_argument("--spec", type=Path, help="SyntheticSceneSpec JSON")
    m.add_argument("--count", type=int)
    m.add_argument("--backdrop-count", type=int)
    m.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"))
    _add_common(m)

    d = sub.add_parser("corrupt-depth", help="affine + Gaussian corruption of a depth map")
    d.add_argument("--depth", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--a", type=float, default=1.0)
    d.add_argument("--b", type=float, default=0.0)
    d.add_argument("--sigma", type=float, default=0.0)
    d.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_render(args):
    scene = io.load_scene(args.scene)
    cam = io.load_camera(args.camera)
    res = rasterize(scene, cam, omega=args.omega if args.enhanced_depth else None)
    io.write_image(args.out, res.color)
    if args.depth:
        io.write_pfm(args.depth, res.depth)
    if args.enhanced_depth:
        io.write_pfm(args.enhanced_depth, res.depth_enhanced)
    return EXIT_OK


def write_dataset(out, data, spec, seed):
    out = Path(out)
    for sub in ("cameras", "images", "depth", "prior"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    io.save_scene(out / "scene.json", data.scene)
    io.save_scene(out / "init.json", init_scene(spec, seed))
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1))
    (out / "split.json").write_text(json.dumps({"train": data.train_idx, "holdout": data.holdout_idx,
                                                "seed": seed}, indent=1))
    priors = {k: v.prior_depth for k, v in zip(data.train_idx, make_views(data, spec, seed))}
    for k, cam in enumerate(data.cameras):
        io.save_camera(out / "cameras" / f"{k:03d}.json", cam)
        io.write_pfm(out / "images" / f"{k:03d}.pfm", data.images[k])
        io.write_png(out / "images" / f"{k:03d}.png", data.images[k])
        io.write_pfm(out / "depth" / f"{k:03d}.pfm", data.depths[k])
        if k in priors:
            io.write_pfm(out / "prior" / f"{k:03d}.pfm", priors[k])


def read_dataset(path):
    path = Path(path)
    split = json.loads((path / "split.json").read_text())
    n = len(split["train"]) + len(split["holdout"])
    cams = [io.load_camera(path / "cameras" / f"{k:03d}.json") for k in range(n)]
    images = [io.read_pfm(path / "images" / f"{k:03d}.pfm").astype(np.float64) for k in range(n)]
    depths = [io.read_pfm(path / "depth" / f"{k:03d}.pfm").astype(np.float64) for k in range(n)]
    scene = io.load_scene(path / "scene.json")
    data = SyntheticData(scene, cams, images, depths, split["train"], split["holdout"])
    views = []
    for k in data.train_idx:
        prior = io.read_pfm(path / "prior" / f"{k:03d}.pfm").astype(np.float64)
        views.append(View(cams[k], images[k], prior, depths[k]))
    return data, views


def cmd_make_scene(args):
    kw = json.loads(args.spec.read_text()) if args.spec else {}
    if args.count is not None:
        kw["count"] = args.count
    if args.backdrop_count is not None:
        kw["backdrop_count"] = args.backdrop_count
    if args.resolution:
        kw["resolution"] = tuple(args.resolution)
    spec = SyntheticSceneSpec(**kw)
    data = generate_scene(spec, args.seed)
    write_dataset(args.out_dir, data, spec, args.seed)
    print(f"wrote {len(data.cameras)} views ({len(data.train_idx)} train, {len(data.holdout_idx)} holdout) "
          f"to {args.out_dir}")
    return EXIT_OK


def cmd_train(args):
    config = build_config(args)
    data, views = read_dataset(args.data)
    init = io.load_scene(args.init or args.data / "init.json")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_config(out / "config.json", config)

    def checkpoint(state):
        if args.checkpoint_every and state.iteration % args.checkpoint_every == 0:
            io.save_checkpoint(out, state)
            last = state.history[-1]
            log.info("iteration %d: total %.5f, PSNR %.2f dB", state.iteration, last.total, last.psnr)

    scene, history = train(views, init, config, callback=checkpoint)
    io.save_scene(out / "scene_final.json", scene)
    io.write_history(out / "history.csv", history)
    p, s, r = evaluate_holdout(scene, data)
    metrics = {"holdout_psnr": p, "holdout_ssim": s, "holdout_depth_rmse": r, "iterations": config.iterations}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    io.print_table([metrics], list(metrics))
    return EXIT_OK


def cmd_edges(args):
    img = io.read_image(args.image)
    if img.ndim == 2 or img.max() > 1.0 or img.min() < 0.0:
        img = np.clip(img, 0.0, 1.0)
    mask, stages = canny(img, args.low, args.high, return_stages=True)
    io.write_image(args.out, mask.astype(np.float64))
    if args.magnitude:
        io.write_pfm(args.magnitude, stages["magnitude"])
    print(f"{int(mask.sum())} edge pixels of {mask.size}")
    return EXIT_OK


def gradient_instance(n, size, seed):
    """Small random scene, camera, target image and prior depth for gradient checks."""
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0.0, -4.0, 1.0], [0.0, 0.0, 0.0], resolution=(size, size))
    scene = Scene(rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(0.2, 0.45, (n, 3)), rng.normal(size=(n, 4)),
                  rng.uniform(0.3, 0.8, n), rng.uniform(0.15, 0.85, (n, 3)), background=(0.1, 0.2, 0.3))
    target = Scene(scene.mu + rng.normal(0, 0.1, (n, 3)), scene.scale, scene.rotation, scene.opacity,
                   rng.uniform(0.1, 0.9, (n, 3)), scene.background)
    ref = rasterize(target, cam)
    gt = ref.color
    prior = corrupt_depth(ref.depth, a=0.5, b=1.0, sigma=0.05, seed=seed)
    return scene, cam, gt, prior


def cmd_check_grad(args):
    config = build_config(args)
    scene, cam, gt, prior = gradient_instance(args.primitives, args.size, args.seed)
    report = check_gradients(scene, cam, gt, prior, config.weights, h=args.step, terms=args.terms,
                             depth_mode=config.depth_mode)
    rows = [{"term": t, **v} for t, v in report.items()]
    io.print_table(rows, ["term", "max_rel_err", "checked", "skipped", "grad_norm", "passed"])
    if args.json:
        args.json.write_text(json.dumps(report, indent=1))
    return EXIT_OK if all(v["passed"] for v in report.values()) else EXIT_RUNTIME


def cmd_ablate(args):
    if args.smallest:
        spec = AblationSpec.smallest()
    elif args.spec:
        spec = AblationSpec.from_dict(json.loads(args.spec.read_text()))
    else:
        spec = AblationSpec()
    config = build_config(args)
    if args.smallest and args.iterations is None:
        config = dataclasses.replace(config, iterations=30)
    report = run_ablation(spec, config, jobs=args.jobs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(report.to_dict(), indent=1))
    io.print_table(report.rows(), ["variant", "scene", "runs", "failed", "psnr", "ssim", "depth_rmse"])
    if "Full" in spec.variants and "None" in spec.variants:
        checks, _ = check_ordering(report)
        for name, ok in checks.items():
            print(f"{'PASS' if ok else 'FAIL'}  {name}")
    failed = [c for c in report.cells if not c.ok]
    for c in failed:
        print(f"failed cell {c.variant}/{c.scene}/seed {c.seed}: {c.error}", file=sys.stderr)
    print(f"{len(report.cells)} cells in {report.seconds:.1f} s")
    return EXIT_OK


def cmd_corrupt_depth(args):
    d = io.read_pfm(args.depth).astype(np.float64)
    io.write_pfm(args.out, corrupt_depth(d, args.a, args.b, args.sigma, args.seed))
    return EXIT_OK


COMMANDS = {
    "render": cmd_render,
    "train": cmd_train,
    "edges": cmd_edges,
    "check-grad": cmd_check_grad,
    "ablate": cmd_ablate,
    "make-scene": cmd_make_scene,
    "corrupt-depth": cmd_corrupt_depth,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"splatreg {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
