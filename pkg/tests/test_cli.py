import json
import subprocess
import sys

import numpy as np
import pytest

from oracles import power_pair_weight_gap
from vorotransport import io
from vorotransport.cli import main
from vorotransport.measure import uniform_grid


def write_problem(tmp_path, sites, k=16, density=None, name="p"):
    d = tmp_path / name
    d.mkdir()
    grid = np.ones((k, k)) if density is None else density
    np.savetxt(d / "density.csv", grid, delimiter=",", fmt="%.17g")
    lines = ["x,y,demand"] + [f"{float(x)!r},{float(y)!r},{float(lam)!r}" for x, y, lam in sites]
    (d / "sites.csv").write_text("\n".join(lines) + "\n")
    return d


def base(d, *extra):
    return ["--sites", str(d / "sites.csv"), "--density", str(d / "density.csv"), "--normalize",
            "--out", str(d / "out"), *extra]


def run(cmd, d, *extra):
    return main([cmd, *base(d, *extra)])


def weights_path(d):
    return ["--weights", str(d / "out" / "weights.json")]


def load(d, name):
    return json.loads((d / "out" / name).read_text())


MIRROR = [(0.25, 0.5, 0.5), (0.75, 0.5, 0.5)]


def test_solve_mirror_gives_zero_weights(tmp_path, capsys):
    d = write_problem(tmp_path, MIRROR)
    assert run("solve", d, "--no-figures") == 0
    assert load(d, "weights.json") == [0.0, 0.0]
    report = json.loads(capsys.readouterr().out)
    assert report["converged"] and report["max_abs_mass_error"] <= 1e-12
    assert set(report) >= {"phi_final", "iters", "converged", "mass_error"}


def test_solve_single_site(tmp_path):
    d = write_problem(tmp_path, [(0.3, 0.3, 1.0)], k=8)
    assert run("solve", d, "--no-figures") == 0
    assert load(d, "weights.json") == [0.0]
    rows = io.read_assignment_csv(d / "out" / "assignment.csv")
    assert len(rows) == 64 and all(s == 0 and f == 1.0 for _, s, f in rows)


def test_solve_power_pair_matches_scalar_oracle(tmp_path):
    d = write_problem(tmp_path, [(0.25, 0.5, 0.75), (0.75, 0.5, 0.25)], k=128)
    assert run("solve", d, "--metric", "sqeuclidean", "--no-figures") == 0
    w = load(d, "weights.json")
    m = uniform_grid(128)
    expected = power_pair_weight_gap(m.positions[:, 0], m.masses, 0.75, 0.25, 0.75)
    assert abs((w[0] - w[1]) - expected) <= 1e-6


def test_solve_writes_trace_and_figures(tmp_path):
    d = write_problem(tmp_path, [(0.2, 0.3, 1), (0.7, 0.8, 2), (0.8, 0.2, 1)])
    assert run("solve", d, "--trace") == 0
    trace = load(d, "trace.json")
    assert np.all(np.diff(trace["phi_trace"]) < 0)
    for name in ("phi_trace.png", "partition.png"):
        assert (d / "out" / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_solve_is_deterministic(tmp_path):
    sites = [(0.2, 0.3, 1), (0.7, 0.8, 2), (0.8, 0.2, 1), (0.4, 0.6, 1.5)]
    a = write_problem(tmp_path, sites, name="a")
    b = write_problem(tmp_path, sites, name="b")
    for d in (a, b):
        assert run("solve", d, "--seed", "7", "--trace") == 0
        assert run("render", d, *weights_path(d)) == 0
    names = sorted(p.name for p in (a / "out").iterdir())
    assert "render.ppm" in names and "partition.png" in names
    for name in names:
        assert (a / "out" / name).read_bytes() == (b / "out" / name).read_bytes(), name


def test_round_trip_verify(tmp_path, capsys):
    rng = np.random.default_rng(3)
    sites = [(x, y, lam) for (x, y), lam in zip(rng.random((4, 2)), rng.random(4) + 0.2)]
    d = write_problem(tmp_path, sites)
    assert run("solve", d, "--no-figures") == 0
    capsys.readouterr()
    assert run("verify", d, *weights_path(d)) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["duals_match"] and abs(report["relative_gap"]) <= 1e-9
    assert report["mismatched_atoms"] == []
    assert load(d, "verify.json") == report


def test_verify_mirror(tmp_path, capsys):
    d = write_problem(tmp_path, MIRROR)
    run("solve", d, "--no-figures")
    capsys.readouterr()
    assert run("verify", d, *weights_path(d)) == 0
    assert abs(json.loads(capsys.readouterr().out)["relative_gap"]) <= 1e-9


def test_verify_detects_perturbed_weights(tmp_path, capsys):
    d = write_problem(tmp_path, MIRROR)
    run("solve", d, "--no-figures")
    w = load(d, "weights.json")
    w[0] += 0.1
    bad = d / "bad.json"
    io.write_weights(bad, w)
    capsys.readouterr()
    assert main(["verify", *base(d), "--weights", str(bad)]) == 3
    assert json.loads(capsys.readouterr().out)["status"] == "demand mismatch"


def test_solve_non_convergence_exit(tmp_path):
    rng = np.random.default_rng(1)
    sites = [(x, y, 1.0) for x, y in rng.random((5, 2))]
    d = write_problem(tmp_path, sites)
    assert run("solve", d, "--max-iters", "1", "--no-figures") == 3
    assert load(d, "report.json")["converged"] is False


@pytest.mark.parametrize("extra", [["--metric", "chebyshev"], ["--phi-tol", "0"], ["--cell-size", "-1"],
                                   ["--max-iters", "-2"], ["--bogus"]])
def test_solve_validation_exit(tmp_path, extra, capsys):
    d = write_problem(tmp_path, MIRROR)
    assert run("solve", d, *extra) == 2


def test_unbalanced_demands_exit(tmp_path):
    d = write_problem(tmp_path, MIRROR)
    assert main(["solve", "--sites", str(d / "sites.csv"), "--density", str(d / "density.csv"),
                 "--cell-size", "0.5", "--out", str(d / "out")]) == 2


def test_missing_file_exit(tmp_path):
    assert main(["solve", "--sites", str(tmp_path / "nope.csv"), "--density", str(tmp_path / "x.csv")]) == 2


def test_render_single_site(tmp_path):
    d = write_problem(tmp_path, [(0.5, 0.5, 1.0)], k=10)
    io.write_weights(tmp_path / "w.json", [0.0])
    img_path = tmp_path / "one.ppm"
    assert main(["render", *base(d), "--weights", str(tmp_path / "w.json"), "--image", str(img_path)]) == 0
    img = io.read_ppm(img_path)
    assert img.shape == (10, 10, 3)
    assert len(np.unique(img.reshape(-1, 3), axis=0)) == 1
    assert img.reshape(-1, 3).any(axis=1).all()


def test_render_bisector_is_a_black_column(tmp_path):
    d = write_problem(tmp_path, MIRROR, k=15)
    io.write_weights(tmp_path / "w.json", [0.0, 0.0])
    assert main(["render", *base(d), "--weights", str(tmp_path / "w.json")]) == 0
    img = io.read_ppm(d / "out" / "render.ppm")
    black = ~img.any(axis=2)
    cols = np.flatnonzero(black.any(axis=0))
    assert cols.tolist() == [7]
    assert black[:, 7].all()


def test_render_fitted_pixel_counts(tmp_path, capsys):
    k = 48
    rng = np.random.default_rng(9)
    lam = rng.random(5) + 0.3
    lam /= lam.sum()
    sites = [(x, y, l) for (x, y), l in zip(rng.random((5, 2)), lam)]
    d = write_problem(tmp_path, sites, k=k)
    assert run("solve", d, "--no-figures") == 0
    capsys.readouterr()
    assert run("render", d, *weights_path(d)) == 0
    report = json.loads(capsys.readouterr().out)
    counts = np.array(report["pixels"])
    assert np.all(np.abs(counts - lam * k * k) <= k + report["tie_pixels"])


def test_render_needs_raster(tmp_path):
    d = write_problem(tmp_path, MIRROR)
    (d / "atoms.csv").write_text("x,y,mass\n0.1,0.1,0.5\n0.9,0.9,0.5\n")
    io.write_weights(tmp_path / "w.json", [0.0, 0.0])
    argv = ["render", "--sites", str(d / "sites.csv"), "--density", str(d / "atoms.csv"), "--format", "atoms",
            "--weights", str(tmp_path / "w.json"), "--out", str(d / "out")]
    assert main(argv) == 2


def test_assign_writes_labels(tmp_path, capsys):
    d = write_problem(tmp_path, MIRROR, k=15)
    io.write_weights(tmp_path / "w.json", [0.0, 0.0])
    assert main(["assign", *base(d), "--weights", str(tmp_path / "w.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["tie_atoms"] == 15
    labels = io.read_pgm(d / "out" / "labels.pgm")
    assert labels.shape == (15, 15)
    ties = load(d, "labels_ties.json")["tie_pixels"]
    assert sorted(c for _, c in ties) == [7] * 15
    rows = io.read_assignment_csv(d / "out" / "assignment.csv")
    assert len(rows) == 225 + 15


def test_cost_command(tmp_path, capsys):
    d = write_problem(tmp_path, [(0.0, 0.0, 1.0)], k=32)
    io.write_weights(tmp_path / "w.json", [0.0])
    assert main(["cost", *base(d), "--weights", str(tmp_path / "w.json")]) == 0
    cost = json.loads(capsys.readouterr().out)["transport_cost"]
    assert abs(cost - 0.7652) <= 1 / 32


def test_probe_command(tmp_path, capsys):
    d = write_problem(tmp_path, [(0.2, 0.3, 1), (0.7, 0.8, 1), (0.8, 0.2, 1)])
    for metric in ("euclidean", "sqeuclidean", "pnorm:3", "concave-sqrt"):
        assert run("probe", d, "--metric", metric, "--steps", "50") == 0
        report = json.loads(capsys.readouterr().out)
        assert report["monotone"] and len(report["pairs"]) == 3
    assert run("probe", d, "--steps", "1") == 2


def test_pgm_density_input(tmp_path, capsys):
    d = write_problem(tmp_path, MIRROR, k=4)
    (d / "d.pgm").write_text("P2\n4 4\n1\n" + "1 1 1 1\n" * 4)
    argv = ["solve", "--sites", str(d / "sites.csv"), "--density", str(d / "d.pgm"), "--out", str(d / "o2"),
            "--no-figures"]
    assert main(argv) == 0


def test_module_entry_point(tmp_path):
    d = write_problem(tmp_path, MIRROR, k=8)
    proc = subprocess.run([sys.executable, "-m", "vorotransport", "solve", *base(d), "--no-figures"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["converged"] is True
