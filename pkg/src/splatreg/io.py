"""Readers and writers for PFM/PNG rasters, scene/camera/config JSON and training logs."""

from __future__ import annotations

import csv
import json
import re
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .gaussians import Camera, Scene
from .trainer import GROUPS, TrainConfig

# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, data):
    """Write a float32 PFM (``PF`` for HxWx3, ``Pf`` for HxW), little-endian, top row first."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    elif data.ndim == 2:
        header = "Pf"
    else:
        raise ValueError(f"PFM needs HxW or HxWx3 data, got shape {data.shape}")
    H, W = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{W} {H}\n-1.0\n".encode("ascii"))
        # PFM stores rows bottom-to-top
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    kind, W, H, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = W * H * channels
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=m.end())
    shape = (H, W, 3) if channels == 3 else (H, W)
    return data.reshape(shape)[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def write_png(path, img):
    """8-bit PNG from a float image in [0, 1] (HxW or HxWx3)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def read_png(path):
    """Float image in [0, 1]; RGB images become HxWx3, grayscale HxW."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def read_image(path):
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path).astype(np.float64)
    return read_png(path)


def write_image(path, img):
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_png(path, img)


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------


def scene_to_dict(scene):
    return {
        "background": scene.background.tolist(),
        "primitives": [
            {
                "mu": scene.mu[i].tolist(),
                "scale": scene.scale[i].tolist(),
                "rotation": scene.rotation[i].tolist(),
                "opacity": float(scene.opacity[i]),
                "color": scene.color[i].tolist(),
            }
            for i in range(len(scene))
        ],
    }


def scene_from_dict(d):
    prims = d["primitives"]
    return Scene(
        mu=[p["mu"] for p in prims],
        scale=[p["scale"] for p in prims],
        rotation=[p["rotation"] for p in prims],
        opacity=[p["opacity"] for p in prims],
        color=[p["color"] for p in prims],
        background=d.get("background", [0.0, 0.0, 0.0]),
    )


def camera_to_dict(cam):
    return {
        "pose": cam.pose.tolist(),
        "focal": list(cam.focal),
        "principal_point": list(cam.principal_point),
        "resolution": list(cam.resolution),
    }


def camera_from_dict(d):
    return Camera.from_pose(d["pose"], d["focal"], d["principal_point"], d["resolution"])


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1))


def save_scene(path, scene):
    _dump(path, scene_to_dict(scene))


def load_scene(path):
    return scene_from_dict(json.loads(Path(path).read_text()))


def save_camera(path, cam):
    _dump(path, camera_to_dict(cam))


def load_camera(path):
    return camera_from_dict(json.loads(Path(path).read_text()))


def save_config(path, config):
    _dump(path, config.to_dict())


def load_config(path):
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Checkpoints and history
# ---------------------------------------------------------------------------


def save_checkpoint(out_dir, state, tag=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = tag or f"{state.iteration:06d}"
    save_scene(out / f"scene_{tag}.json", state.scene)
    opt = state.optimizer
    arrays = {f"m_{k}": opt.m[k] for k in opt.m} | {f"v_{k}": opt.v[k] for k in opt.v}
    np.savez(out / f"optimizer_{tag}.npz", t=opt.t, iteration=state.iteration, **arrays)
    return out / f"scene_{tag}.json"


def load_optimizer(path, optimizer):
    with np.load(path) as z:
        optimizer.t = int(z["t"])
        for k in GROUPS:
            if f"m_{k}" in z:
                optimizer.m[k] = z[f"m_{k}"]
                optimizer.v[k] = z[f"v_{k}"]
    return optimizer


HISTORY_FIELDS = ["iteration", "view", "L_color", "L_depth", "L_edge", "L_tv", "total", "patch_size", "PSNR"]


def write_history(path_or_file, history):
    close = False
    if hasattr(path_or_file, "write"):
        f = path_or_file
    else:
        f = open(path_or_file, "w", newline="")
        close = True
    try:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for rep in history:
            row = rep.row()
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in HISTORY_FIELDS})
    finally:
        if close:
            f.close()


def print_table(rows, columns, file=sys.stdout):
    widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) if rows else len(c) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns), file=file)
    for r in rows:
        print("  ".join(_fmt(r.get(c)).ljust(widths[c]) for c in columns), file=file)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)
