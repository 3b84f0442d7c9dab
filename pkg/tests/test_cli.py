import json
import subprocess
import sys

import pytest

from headsplat.cli import main
from headsplat.geometry import load_cameras
from headsplat.splats import import_ply


def run(*argv):
    return main([str(a) for a in argv])


def test_rig_writes_96_poses(tmp_path):
    assert run("rig", "--out", tmp_path / "rig.json", "--size", 64) == 0
    poses = load_cameras(tmp_path / "rig.json")
    assert len(poses) == 96 and poses[0].width == 64
    assert run("rig", "--out", tmp_path / "one.json", "--elevations", "15", "--azimuths", 4) == 0
    assert [p.azimuth for p in load_cameras(tmp_path / "one.json")] == [0.0, 90.0, 180.0, 270.0]


def test_synth_render_reconstruct_eval_chain(tmp_path):
    d = tmp_path
    assert run("rig", "--out", d / "ring.json", "--elevations", "0", "--azimuths", 8,
               "--size", 16, "--radius", 3.0) == 0
    assert run("--seed", 3, "synth", "--blobs", 2, "--cameras", d / "ring.json", "--out", d / "refs") == 0
    assert len(list((d / "refs").glob("view_*.png"))) == 8
    assert run("render", "--cloud", d / "refs" / "subject.ply", "--cameras", d / "ring.json",
               "--out", d / "rend") == 0
    stats = json.loads((d / "rend" / "stats.json").read_text())
    assert len(stats["views"]) == 8 and stats["views"][0]["drawn"] > 0
    assert run("reconstruct", "--refs", d / "refs", "--cameras", d / "ring.json", "--out", d / "rec.ply",
               "--grid", 8, "--iters", 3, "--eval-every", 3, "--holdout", "1,5",
               "--lr-scale", "position=1.0", "--views-per-iter", 2,
               "--report", d / "rep.json", "--figure", d / "loss.png") == 0
    assert len(import_ply(d / "rec.ply")) == 4 * 64
    rep = json.loads((d / "rep.json").read_text())
    assert rep["config"]["held_out_views"] == [1, 5] and len(rep["history"]) == 3
    assert rep["config"]["lr_scales"]["position"] == 1.0 and rep["config"]["lr_scales"]["scale"] == 0.5
    assert rep["config"]["views_per_iteration"] == 2
    assert (d / "loss.png").stat().st_size > 0
    assert run("optimize", "--refs", d / "refs", "--cameras", d / "ring.json", "--init", d / "rec.ply",
               "--out", d / "opt.ply", "--iters", 2) == 0
    assert run("eval", "--pred", d / "rend", "--ref", d / "refs", "--out", d / "m.json",
               "--csv", d / "m.csv") == 0
    m = json.loads((d / "m.json").read_text())
    # re-rendering the ground truth matches the references up to 8-bit quantisation
    assert m["aggregate"]["psnr"]["mean"] > 45
    assert len((d / "m.csv").read_text().splitlines()) == 9


@pytest.mark.parametrize("mode", ["forward", "reverse", "oracle-sample"])
def test_diffuse_sim(tmp_path, mode):
    out = tmp_path / "trace.json"
    assert run("diffuse-sim", "--mode", mode, "--T", 20, "--shape", "3,8,8", "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["mode"] == mode and doc["shape"] == [3, 8, 8]
    assert len(doc["trace"]) == (21 if mode == "forward" else 20)
    if mode == "oracle-sample":
        assert doc["target_max_abs_err"] < 1e-6
    if mode == "forward":
        assert doc["closed_form_max_abs_err"] < 1e-10


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run("render", "--cameras", tmp_path / "x.json", "--out", tmp_path) == 1
    assert run("no-such-command") == 1
    assert run("--threads", 0, "rig", "--out", tmp_path / "r.json") == 1
    assert run("reconstruct", "--refs", tmp_path, "--cameras", tmp_path / "c.json", "--out",
               tmp_path / "o.ply", "--lr-scale", "position") == 1
    err = capsys.readouterr().err
    assert "--cloud" in err


def test_missing_input_exits_2_naming_file(tmp_path, capsys):
    missing = tmp_path / "absent.ply"
    assert run("render", "--cloud", missing, "--cameras", tmp_path / "c.json", "--out", tmp_path) == 2
    assert "absent.ply" in capsys.readouterr().err


def test_contract_violation_exits_1(tmp_path, capsys):
    run("rig", "--out", tmp_path / "ring.json", "--elevations", "0", "--azimuths", 8, "--size", 8)
    run("synth", "--blobs", 0, "--cameras", tmp_path / "ring.json", "--out", tmp_path / "refs")
    code = run("reconstruct", "--refs", tmp_path / "refs", "--cameras", tmp_path / "ring.json",
               "--out", tmp_path / "o.ply", "--holdout", "0", "--iters", 1, "--grid", 4)
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "held out" in err[0]


def test_version_and_module_entry():
    out = subprocess.run([sys.executable, "-m", "headsplat", "--version"], capture_output=True,
                         text=True, check=True).stdout
    assert "numpy" in out and "numba" in out


def test_run_experiment_cli(tmp_path):
    spec = {"subjects": [0], "shell_splats": 200, "ring": {"count": 8, "width": 12, "height": 12},
            "grid": [4, 4], "holdout": [1], "optimizer": {"iterations": 2, "eval_every": 2}}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert run("run-experiment", "--spec", tmp_path / "spec.json", "--out", tmp_path / "out") == 0
    assert (tmp_path / "out" / "metrics.csv").exists()
    assert (tmp_path / "out" / "figures" / "heldout_psnr.png").exists()
    assert list((tmp_path / "out" / "figures").glob("loss_default_seed_0000.png"))
