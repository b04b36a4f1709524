import math

import numpy as np
import pytest

from splatreg.gaussians import Camera, Scene


def random_scene(rng, n, spread=0.6, scale=(0.15, 0.4), background=(0.1, 0.2, 0.3)):
    return Scene(
        mu=rng.uniform(-spread, spread, (n, 3)),
        scale=rng.uniform(*scale, (n, 3)),
        rotation=rng.normal(size=(n, 4)),
        opacity=rng.uniform(0.3, 0.9, n),
        color=rng.uniform(0.1, 0.9, (n, 3)),
        background=background,
    )


def front_camera(res=(16, 16), distance=4.0):
    return Camera.look_at([0.0, -distance, 1.0], [0.0, 0.0, 0.0], resolution=res)


def central_diff(f, x, h=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences (independent oracle)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def hamilton(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return (
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    )


def rotation_by_conjugation(q):
    """Rotation matrix whose columns are q e_i q* (no closed-form matrix involved)."""
    n = math.sqrt(sum(c * c for c in q))
    q = tuple(c / n for c in q)
    qc = (q[0], -q[1], -q[2], -q[3])
    cols = []
    for e in np.eye(3):
        v = hamilton(hamilton(q, (0.0, *e)), qc)
        cols.append(v[1:])
    return np.array(cols).T


def scalar_composite(entries, background):
    """Fold front-to-back over ``(distance, alpha, value)`` triples with plain floats."""
    out = [0.0] * len(background)
    trans = 1.0
    for _, a, value in sorted(entries, key=lambda e: e[0]):
        for c in range(len(out)):
            out[c] += value[c] * a * trans
        trans *= 1.0 - a
    for c in range(len(out)):
        out[c] += background[c] * trans
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
