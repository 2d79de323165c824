import csv
import json

import numpy as np
import pytest

from foamopt.cli import EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_OK, main, save_seeds
from foamopt.config import ConfigError, ProblemConfig, loadcase_from_spec
from foamopt.implicit import foam_field
from foamopt.sensitivity import FoamState
from foamopt.voronoi import SeedSet

BRIDGE = {
    "domain": {"type": "box", "lo": [0, 0], "hi": [2, 1]},
    "coarse_res": [4, 2], "refine": 6, "n_seeds": 12, "v": 0.4, "w": 0.1,
    "r_min_factor": 0.5, "snapshot_interval": 1,
    "loads": {"supports": [{"box": [[0, 0], [0, 1]], "axes": [0, 1]}],
              "forces": [{"box": [[2, 0.4], [2, 0.6]], "vector": [0, -1]}]},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def test_malformed_json_is_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    out = tmp_path / "out"
    assert main(["run", "--config", str(p), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_config_validation():
    with pytest.raises(ConfigError):
        ProblemConfig.from_dict({"domain": {"type": "box", "lo": [0, 0], "hi": [1, 1]}, "bogus": 1})
    with pytest.raises(ConfigError):
        ProblemConfig.from_dict({"domain": {"type": "box", "lo": [0, 0], "hi": [1, 1]}, "v": 1.5})
    with pytest.raises(ConfigError):
        ProblemConfig.from_dict({"domain": {"type": "blob"}})
    with pytest.raises(ConfigError):
        ProblemConfig.from_dict({"domain": {"type": "sdf_grid", "path": "missing.npz"}})


def test_loadcase_spreads_total_force():
    from foamopt.domain import Box
    from foamopt.mesh import build_structured
    fine = build_structured(Box([0, 0], [1, 1]), 2, 2).fine
    lc = loadcase_from_spec({"supports": [{"box": [[0, 0], [0, 1]]}],
                             "forces": [{"box": [[1, 0], [1, 1]], "vector": [2.0, -1.0]}]}, fine)
    assert lc.f[0::2].sum() == pytest.approx(2.0) and lc.f[1::2].sum() == pytest.approx(-1.0)
    assert len(lc.fixed_dofs) == 2 * 5
    with pytest.raises(ConfigError):
        loadcase_from_spec({"forces": [{"box": [[5, 5], [6, 6]], "vector": [1, 0]}]}, fine)


def test_zero_iterations_exports_initial_state(tmp_path):
    cfg = dict(BRIDGE, max_iter=0)
    out = tmp_path / "out"
    assert main(["run", "--config", str(_write(tmp_path, cfg)), "--out", str(out)]) == EXIT_NOT_CONVERGED
    for name in ("config.json", "convergence.csv", "seeds.json", "final.vtk", "foam.obj", "summary.json",
                 "density_0000.vtk", "checkpoint.json"):
        assert (out / name).exists(), name
    assert json.loads((out / "config.json").read_text()) == cfg
    rows = list(csv.DictReader(open(out / "convergence.csv")))
    assert len(rows) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 0 and summary["converged"] is False


def test_short_run_with_verify(tmp_path):
    cfg = dict(BRIDGE, max_iter=5, fd_step_factor=1e-3)
    out = tmp_path / "out"
    code = main(["run", "--config", str(_write(tmp_path, cfg)), "--out", str(out), "--verify",
                 "--verify-sample", "3"])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    rows = list(csv.DictReader(open(out / "convergence.csv")))
    assert len(rows) >= 5
    summary = json.loads((out / "summary.json").read_text())
    assert summary["V_frac_final"] <= 0.4 * (1 + 1e-3)
    assert len(list((out / "gradient_checks").glob("iter_*.csv"))) == len(rows)


def _seed_file(tmp_path, X, r, lo, hi):
    p = tmp_path / "seeds.json"
    save_seeds(p, SeedSet(X, r, lo, hi))
    return p


def test_simulate_homogeneous_solid(tmp_path, capsys):
    # a thick shell fills Ω: homogeneous material, end shear spread over the tip face
    cfg = dict(BRIDGE, shell=True, shell_thickness=10.0, coarse_res=[8, 4], refine=4,
               loads={"supports": [{"box": [[0, 0], [0, 1]], "axes": [0, 1]}],
                      "forces": [{"box": [[2, 0], [2, 1]], "vector": [0, -1]}]})
    seeds = _seed_file(tmp_path, [[0.5, 0.5], [1.5, 0.5]], [0.02, 0.02], [0, 0], [2, 1])
    assert main(["simulate", "--config", str(_write(tmp_path, cfg)), "--seeds", str(seeds)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["C_coarse"] <= report["C_fine"]
    assert report["r"] <= 1e-6


def test_export_capsule_accuracy(tmp_path):
    cfg = {"domain": {"type": "box", "lo": [0, 0, 0], "hi": [1, 1, 1]}, "coarse_res": [2, 2, 2], "refine": 4}
    # three seeds around the z axis through (0.5, 0.5): one Voronoi edge along z
    t = np.array([0.0, 2.1, 4.2])
    X = np.column_stack([0.5 + 0.3 * np.cos(t), 0.5 + 0.3 * np.sin(t), [0.5, 0.5, 0.5]])
    seeds = _seed_file(tmp_path, X, [0.1, 0.1, 0.1], [0, 0, 0], [1, 1, 1])
    obj = tmp_path / "foam.obj"
    res = 64
    assert main(["export", "--config", str(_write(tmp_path, cfg)), "--seeds", str(seeds), "--out", str(obj),
                 "--resolution", str(res)]) == EXIT_OK
    verts = np.array([list(map(float, line.split()[1:])) for line in obj.read_text().splitlines()
                      if line.startswith("v ")])
    assert len(verts) > 100
    c = ProblemConfig.from_dict(cfg)
    dom = c.build_domain()
    fine = c.build_mesh(dom).fine
    state = FoamState(c.build_settings(fine, dom), SeedSet(X, [0.1] * 3, [0, 0, 0], [1, 1, 1]))
    phi = np.minimum(foam_field(verts, state.foam), dom(verts))
    assert np.max(np.abs(phi)) <= 0.5 / res


def test_export_empty_foam(tmp_path):
    cfg = {"domain": {"type": "box", "lo": [0, 0], "hi": [1, 1]}, "coarse_res": [2, 2], "refine": 2}
    seeds = _seed_file(tmp_path, [[0.5, 0.5]], [0.05], [0, 0], [1, 1])
    obj = tmp_path / "e.obj"
    assert main(["export", "--config", str(_write(tmp_path, cfg)), "--seeds", str(seeds),
                 "--out", str(obj)]) == EXIT_OK
    assert not [l for l in obj.read_text().splitlines() if l.startswith(("v ", "l ", "f "))]


def test_export_shell_only_is_closed(tmp_path):
    cfg = {"domain": {"type": "box", "lo": [0, 0], "hi": [1, 1]}, "coarse_res": [2, 2], "refine": 4,
           "shell": True, "shell_thickness": 0.1}
    seeds = _seed_file(tmp_path, [[0.5, 0.5]], [0.05], [0, 0], [1, 1])
    obj = tmp_path / "s.obj"
    assert main(["export", "--config", str(_write(tmp_path, cfg)), "--seeds", str(seeds),
                 "--out", str(obj), "--resolution", "50"]) == EXIT_OK
    segs = [l for l in obj.read_text().splitlines() if l.startswith("l ")]
    ids = np.array([list(map(int, l.split()[1:])) for l in segs])
    # every vertex of a closed polyline has degree two: outer and inner loops
    assert np.all(np.bincount(ids.ravel())[1:] == 2)


def test_check_gradients_command(tmp_path):
    cfg = dict(BRIDGE, fd_step_factor=1e-3)
    out = tmp_path / "gc"
    code = main(["check-gradients", "--config", str(_write(tmp_path, cfg)), "--out", str(out),
                 "--verify-sample", "6"])
    assert code == EXIT_OK
    assert (out / "gradient_check.csv").exists()


def test_missing_seeds_is_config_error(tmp_path):
    assert main(["simulate", "--config", str(_write(tmp_path, BRIDGE)), "--seeds",
                 str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert main(["bogus"]) == EXIT_CONFIG
