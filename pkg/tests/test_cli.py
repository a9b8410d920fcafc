import json

import numpy as np
import pytest

from meanfield.cli import EXIT_CONFIG, EXIT_SOLVER, main


@pytest.fixture
def disk_file(tmp_path):
    p = tmp_path / "disk.json"
    p.write_text(json.dumps({"kind": "disk", "radius": 1.0}))
    return p


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([*map(str, args), "--out", str(out)])
    return code, out


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_malformed_domain_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"kind": "disk", "radius": -1')
    code, out = run(tmp_path, "o", "classify", "--domain", bad)
    assert code == EXIT_CONFIG
    assert not out.exists()


@pytest.mark.parametrize("args", [["solve", "--mesh-h", "-1"], ["frobnicate"], ["solve", "--tol-newton", "0"],
                                  ["solve", "--lambda", "1", "--h", "{not json"]])
def test_bad_config_exit_2(tmp_path, disk_file, args):
    code, out = run(tmp_path, "o", args[0], "--domain", disk_file, *args[1:])
    assert code == EXIT_CONFIG
    assert not out.exists()


def test_bad_guess_exit_2(tmp_path, disk_file):
    g = tmp_path / "g.csv"
    g.write_text("node_index,x,y,value\n0,0,0,1\n")
    code, out = run(tmp_path, "o", "solve", "--domain", disk_file, "--mesh-h", 0.1, "--lambda", 3, "--guess", g)
    assert code == EXIT_CONFIG
    assert not out.exists()


def test_threads_env_validated(tmp_path, disk_file, monkeypatch):
    monkeypatch.setenv("ONSAGER_THREADS", "many")
    code, out = run(tmp_path, "o", "solve", "--domain", disk_file, "--lambda", 1)
    assert code == EXIT_CONFIG and not out.exists()


def test_classify_disk(tmp_path, disk_file):
    code, out = run(tmp_path, "o", "classify", "--domain", disk_file, "--mesh-h", 0.04)
    assert code == 0
    v = json.loads((out / "verdict.json").read_text())
    assert v["kind"] == "first"
    assert v["d_omega"] == pytest.approx(-np.pi, abs=1e-2)
    m = manifest(out)
    assert m["status"] == 0 and set(m["outputs"]) == {"verdict.json"}
    assert len(m["input_hash"]) == 64 and m["mesh"]["n_nodes"] > 0


def test_solve_reproducible(tmp_path, disk_file):
    args = ["solve", "--domain", disk_file, "--mesh-h", 0.08, "--lambda", 10]
    c1, o1 = run(tmp_path, "a", *args)
    c2, o2 = run(tmp_path, "b", *args)
    assert c1 == c2 == 0
    assert (o1 / "u.csv").read_bytes() == (o2 / "u.csv").read_bytes()
    assert manifest(o1)["input_hash"] == manifest(o2)["input_hash"]
    # the saved field is a converged guess
    c3, o3 = run(tmp_path, "c", *args, "--guess", o1 / "u.csv")
    assert c3 == 0
    assert json.loads((o3 / "solve.json").read_text())["newton_iters"] <= 1


def test_solve_nonconvergence_exit_3(tmp_path, disk_file):
    code, out = run(tmp_path, "o", "solve", "--domain", disk_file, "--mesh-h", 0.1, "--eps", 1.6)
    assert code == EXIT_SOLVER
    assert manifest(out)["status"] == EXIT_SOLVER


def test_weighted_solve_and_spectrum(tmp_path, disk_file):
    code, out = run(tmp_path, "o", "solve", "--domain", disk_file, "--mesh-h", 0.1, "--lambda", 5,
                    "--h", '{"hhat": "exp(x)"}')
    assert code == 0
    code, out = run(tmp_path, "s", "spectrum", "--domain", disk_file, "--mesh-h", 0.1, "--lambda", 5)
    assert code == 0
    assert json.loads((out / "spectrum.json").read_text())["spectrum"]["eigenvalues"][0] > 0


def test_branch_and_curve_outputs(tmp_path, disk_file):
    code, out = run(tmp_path, "b", "branch", "--domain", disk_file, "--mesh-h", 0.1, "--eps-start", 0.3,
                    "--eps-min", 0.3)
    assert code == 0
    m = manifest(out)
    assert sorted(m["outputs"]) == sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    head = (out / "branch.csv").read_text().splitlines()[0]
    assert head.startswith("eps,lambda,energy,entropy,mu_max,min_eig,rho1")
    code, out = run(tmp_path, "c", "entropy-curve", "--domain", disk_file, "--mesh-h", 0.1)
    assert code == 0
    assert (out / "entropy_curve.csv").read_text().startswith("E,S,lambda,dSdE,d2SdE2,segment")
    svg = (out / "S_vs_E.svg").read_text()
    assert svg.startswith("<svg") and "<polyline" in svg
    curve = json.loads((out / "curve.json").read_text())
    assert curve["kind"] == "first" and curve["e8pi"]["infinite"]


def test_robin_and_hamiltonian(tmp_path, disk_file):
    code, out = run(tmp_path, "r", "robin", "--domain", disk_file, "--mesh-h", 0.08)
    assert code == 0 and (out / "robin_map.csv").exists()
    code, out = run(tmp_path, "h", "hamiltonian", "--domain", disk_file, "--mesh-h", 0.08)
    assert code == 0
    pts = json.loads((out / "critical_points.json").read_text())
    assert np.hypot(*pts[0]["q"][0]) < 1e-2
