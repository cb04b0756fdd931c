from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from mvreg import cli, imaging, se3
from mvreg.errors import NonFiniteObjectiveError
from mvreg.projector import pa_pose


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("phantom", "--kind", "sphere_pair", "--dims", "32,32,32", "--spacing", "4,4,4", "--seed", "1", "--out", "p") == 0
    (tmp_path / "g.json").write_text(
        json.dumps({"source_to_detector": 1000.0, "detector_width": 48, "detector_height": 48, "pixel_spacing": 5.0})
    )
    vol = imaging.load_volume("p")
    pa = pa_pose(600.0, vol.center)
    (tmp_path / "pa.json").write_text(json.dumps(se3.pose_to_json(pa)))
    return tmp_path


def snapshot(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


# ---------------------------------------------------------------- phantom


def test_phantom_outputs_and_determinism(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    args = ("phantom", "--kind", "sphere_pair", "--dims", "64,64,64", "--spacing", "1,1,1", "--seed", "1", "--out", "p1")
    assert run(*args) == 0
    first = snapshot(tmp_path)
    assert set(first) == {"p1.vol.json", "p1.vol.raw", "p1.landmarks.json"}
    assert run(*args) == 0
    assert snapshot(tmp_path) == first


def test_phantom_usage_and_data_errors(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run("phantom", "--kind", "sphere_pair") == 1
    assert "--out" in capsys.readouterr().err
    assert run("phantom", "--dims", "8,8,8", "--out", "x") == 2
    assert run("phantom", "--dims", "8,8", "--out", "x") == 1
    assert list(tmp_path.iterdir()) == []


def test_no_subcommand_is_usage_error():
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("--workers", "0", "phantom", "--out", "x") == 1


# ---------------------------------------------------------------- render


def test_render_deterministic(workdir):
    assert run("render", "--volume", "p", "--pose", "pa.json", "--geom", "g.json", "--out", "a", "--pgm", "a.pgm") == 0
    assert run("render", "--volume", "p", "--pose", "pa.json", "--geom", "g.json", "--out", "b") == 0
    assert (workdir / "a.img.raw").read_bytes() == (workdir / "b.img.raw").read_bytes()
    assert (workdir / "a.pgm").read_bytes().startswith(b"P5\n48 48\n")
    assert imaging.load_image("a.img.json").data.max() > 0


def test_render_intensity_zero_volume(workdir):
    imaging.save_volume(imaging.Volume(np.zeros((4, 4, 4))), "zero")
    assert run("render", "--volume", "zero", "--pose", "pa.json", "--geom", "g.json", "--mode", "intensity", "--out", "z") == 0
    np.testing.assert_array_equal(imaging.load_image("z.img.json").data, 1.0)


def test_render_missing_volume(workdir):
    assert run("render", "--volume", "nope", "--pose", "pa.json", "--geom", "g.json", "--out", "z") == 2
    assert not (workdir / "z.img.json").exists()


# ---------------------------------------------------------------- sample-poses


def test_sample_poses(workdir):
    assert run("sample-poses", "--volume", "p", "--seed", "4", "--out", "t.json") == 0
    data = json.loads((workdir / "t.json").read_text())
    eps1, eps2, eps = (np.array(data[k]) for k in ("eps1", "eps2", "eps"))
    assert np.array_equal(eps2 - eps1, eps)
    assert len(data["poses"]) == 2
    assert run("sample-poses", "--volume", "p", "--mode", "spatial", "--seed", "4", "--out", "s.json") == 0
    sp = json.loads((workdir / "s.json").read_text())
    t1, t2 = (se3.pose_from_json(p) for p in sp["poses"])
    assert t2 == se3.compose(se3.pose_from_json(sp["t_trans"]), t1)


# ---------------------------------------------------------------- register


@pytest.fixture
def fixed_pair(workdir):
    assert run("sample-poses", "--volume", "p", "--translation-sd", "3", "--rotation-sd", "0.03", "--seed", "2", "--out", "t.json") == 0
    for i in (0, 1):
        assert run("render", "--volume", "p", "--pose", "t.json", "--index", i, "--geom", "g.json", "--out", f"f{i}") == 0
    poses = json.loads((workdir / "t.json").read_text())["poses"]
    for i, p in enumerate(poses):
        (workdir / f"true{i}.json").write_text(json.dumps(p))
    return workdir


def test_register_self_rendered(fixed_pair):
    (fixed_pair / "c.json").write_text(json.dumps({"iterations": 10}))
    rc = run("register", "--volume", "p", "--geom", "g.json", "--fixed1", "f0.img.json", "--fixed2", "f1.img.json",
             "--init1", "true0.json", "--init2", "true1.json", "--config", "c.json", "--out", "r.json")
    assert rc == 0
    report = json.loads((fixed_pair / "r.json").read_text())
    assert len(report["loss_trace"]) == 10 and report["iterations_run"] == 10
    for a, b in zip(report["initial"], report["refined"]):
        assert se3.geodesic_distance(se3.pose_from_json(a), se3.pose_from_json(b), 1000.0) < 1e-3


def test_register_dimension_mismatch(fixed_pair):
    imaging.save_image(imaging.Image(np.eye(10)), "small")
    rc = run("register", "--volume", "p", "--geom", "g.json", "--fixed1", "small.img.json", "--fixed2", "f1.img.json",
             "--init1", "true0.json", "--init2", "true1.json", "--out", "r.json")
    assert rc == 2
    assert not (fixed_pair / "r.json").exists()


def test_register_non_finite_exit_code(fixed_pair, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteObjectiveError("objective is nan at iteration 0")

    monkeypatch.setattr(cli, "fine_register", boom)
    rc = run("register", "--volume", "p", "--geom", "g.json", "--fixed1", "f0.img.json", "--fixed2", "f1.img.json",
             "--init1", "true0.json", "--init2", "true1.json", "--out", "r.json")
    assert rc == 3


def test_register_coupled(workdir):
    assert run("sample-poses", "--volume", "p", "--mode", "spatial", "--seed", "3", "--out", "s.json") == 0
    for i in (0, 1):
        assert run("render", "--volume", "p", "--pose", "s.json", "--index", i, "--geom", "g.json", "--out", f"s{i}") == 0
    pose = json.loads((workdir / "s.json").read_text())["poses"][0]
    (workdir / "s_true.json").write_text(json.dumps(pose))
    (workdir / "c.json").write_text(json.dumps({"iterations": 4}))
    rc = run("register-coupled", "--volume", "p", "--geom", "g.json", "--fixed1", "s0.img.json", "--fixed2", "s1.img.json",
             "--init", "s_true.json", "--config", "c.json", "--out", "rc.json")
    assert rc == 0
    refined = [se3.pose_from_json(p) for p in json.loads((workdir / "rc.json").read_text())["refined"]]
    t_trans = se3.recentered_rotation(np.pi / 2, imaging.load_volume("p").center)
    assert refined[1] == se3.compose(t_trans, refined[0])


# ---------------------------------------------------------------- evaluate


def test_evaluate_identical_poses(fixed_pair, capsys):
    poses = json.loads((fixed_pair / "t.json").read_text())["poses"]
    (fixed_pair / "both.json").write_text(json.dumps(poses))
    rc = run("evaluate", "--true-poses", "both.json", "--est-poses", "both.json", "--landmarks", "p.landmarks.json",
             "--geom", "g.json", "--out", "m.json")
    assert rc == 0
    out = capsys.readouterr().out
    assert "0.00 ± 0.00, 100%" in out
    assert "lambda = 0.194 mm/px" in out
    assert json.loads((fixed_pair / "m.json").read_text())["lambda"] == 0.194


def test_evaluate_schema_errors(fixed_pair):
    poses = json.loads((fixed_pair / "t.json").read_text())["poses"]
    (fixed_pair / "one.json").write_text(json.dumps(poses[:1]))
    (fixed_pair / "two.json").write_text(json.dumps(poses))
    args = ("--landmarks", "p.landmarks.json", "--geom", "g.json")
    assert run("evaluate", "--true-poses", "one.json", "--est-poses", "two.json", *args) == 2
    assert run("evaluate", "--true-poses", "one.json", "--est-poses", "one.json", *args) == 2
    assert run("evaluate", "--true-poses", "two.json", "--est-poses", "two.json", "--lambda", "-1", *args) == 1


# ---------------------------------------------------------------- experiment


def test_experiment_five_cases(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    spec = {
        "geometry": {"source_to_detector": 1000.0, "detector_width": 32, "detector_height": 32, "pixel_spacing": 8.0},
        "case_distribution": {"mean": [0] * 6, "stddev": [3, 3, 3, 0.03, 0.03, 0.03]},
        "n_cases": 5,
        "phantom": {"kind": "sphere_pair", "dims": [32, 32, 32], "spacing": [4, 4, 4], "seed": 0},
        "initializer": {"kind": "perturbed", "distribution": {"mean": [0] * 6, "stddev": [2, 2, 2, 0.02, 0.02, 0.02]}},
        "refine": {"iterations": 3},
        "rng_seed": 5,
    }
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert run("experiment", "--spec", "spec.json", "--out-dir", "out", "--overlays") == 0
    first = (tmp_path / "out" / "report.json").read_bytes()
    report = json.loads(first)
    assert len(report["cases"]) == 5 and report["after"]["n_cases"] == 5
    assert len(list((tmp_path / "out" / "overlays").iterdir())) == 20
    assert run("experiment", "--spec", "spec.json", "--out-dir", "out2") == 0
    assert (tmp_path / "out2" / "report.json").read_bytes() == first


def test_experiment_bad_spec(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "spec.json").write_text(json.dumps({"n_cases": 2}))
    assert run("experiment", "--spec", "spec.json", "--out-dir", "out") == 2
    assert not (tmp_path / "out").exists()
    assert run("experiment", "--spec", "missing.json", "--out-dir", "out") == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mvreg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("phantom", "render", "sample-poses", "register", "register-coupled", "evaluate", "experiment"):
        assert name in proc.stdout
