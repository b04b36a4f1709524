import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import front_camera, random_scene
from splatreg.cli import build_config, build_parser, main
from splatreg.io import read_pfm, read_png, save_camera, save_scene, write_pfm, write_png


@pytest.fixture
def pair(tmp_path, rng):
    save_scene(tmp_path / "s.json", random_scene(rng, 4))
    save_camera(tmp_path / "c.json", front_camera((16, 16)))
    return tmp_path / "s.json", tmp_path / "c.json"


def test_render_writes_files(tmp_path, pair):
    s, c = pair
    out = tmp_path / "x.png"
    code = main(["render", "--scene", str(s), "--camera", str(c), "--out", str(out),
                 "--depth", str(tmp_path / "d.pfm"), "--enhanced-depth", str(tmp_path / "e.pfm")])
    assert code == 0 and read_png(out).shape == (16, 16, 3)
    assert read_pfm(tmp_path / "d.pfm").shape == (16, 16) and (tmp_path / "e.pfm").exists()


def test_usage_errors_exit_1(pair, capsys):
    s, _ = pair
    assert main(["render", "--scene", str(s), "--out", "x.png"]) == 1
    assert main(["render", "--bogus"]) == 1
    assert main([]) == 1
    assert "required" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "check-grad" in capsys.readouterr().out


def test_runtime_errors_exit_2(tmp_path, pair):
    s, c = pair
    assert main(["render", "--scene", str(tmp_path / "missing.json"), "--camera", str(c), "--out", "x.png"]) == 2
    (tmp_path / "bad.json").write_text('{"primitives": [{"mu": [0, 0, 0]}]}')
    assert main(["render", "--scene", str(tmp_path / "bad.json"), "--camera", str(c),
                 "--out", str(tmp_path / "x.png")]) == 2


def test_weight_overrides():
    args = build_parser().parse_args(["check-grad", "--gamma", "0.3", "--lambda", "0.5", "--patch-min", "6",
                                      "--depth-every", "3", "--seed", "4"])
    cfg = build_config(args)
    assert cfg.weights.gamma == 0.3 and cfg.weights.lambda_dssim == 0.5
    assert cfg.patch_range == (6, 20) and cfg.depth_every == 3 and cfg.seed == 4


def test_edges_command(tmp_path):
    img = np.zeros((24, 24, 3))
    img[:, 12:] = 1.0
    write_png(tmp_path / "step.png", img)
    assert main(["edges", "--image", str(tmp_path / "step.png"), "--out", str(tmp_path / "m.png")]) == 0
    mask = read_png(tmp_path / "m.png")
    assert np.all((mask > 0).sum(axis=1) == 1)


def test_corrupt_depth_command(tmp_path):
    write_pfm(tmp_path / "d.pfm", np.array([[1.0, 2.0]]))
    assert main(["corrupt-depth", "--depth", str(tmp_path / "d.pfm"), "--out", str(tmp_path / "o.pfm"),
                 "--a", "2", "--b", "1"]) == 0
    np.testing.assert_array_equal(read_pfm(tmp_path / "o.pfm"), [[3.0, 5.0]])


def test_check_grad_command(tmp_path):
    out = tmp_path / "g.json"
    assert main(["check-grad", "--primitives", "3", "--size", "12", "--terms", "tv", "edge",
                 "--json", str(out)]) == 0
    report = json.loads(out.read_text())
    assert set(report) == {"tv", "edge"} and all(r["passed"] for r in report.values())


def test_make_scene_then_train(tmp_path):
    data = tmp_path / "data"
    assert main(["make-scene", "--count", "10", "--resolution", "16", "16", "--out-dir", str(data)]) == 0
    assert (data / "prior" / "000.pfm").exists() and not (data / "prior" / "003.pfm").exists()
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--iterations", "6", "--checkpoint-every", "3",
                 "--out-dir", str(run)]) == 0
    for name in ("config.json", "scene_final.json", "history.csv", "metrics.json", "scene_000003.json",
                 "optimizer_000006.npz"):
        assert (run / name).exists(), name
    assert len((run / "history.csv").read_text().splitlines()) == 7


def test_ablate_smallest(tmp_path, capsys):
    assert main(["ablate", "--smallest", "--iterations", "10", "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "ablation.json").read_text())
    assert len(report["rows"]) == 2
    out = capsys.readouterr().out
    assert "2 cells in" in out and "depth RMSE" in out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "splatreg", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "render" in r.stdout
