
import numpy as np
import pytest

from foamopt.config import loadcase_from_spec
from foamopt.domain import Box, Sphere
from foamopt.implicit import volume
from foamopt.mesh import build_structured
from foamopt.optimize import (Evaluator, OptProblem, OptTrace, IterRecord, convergence_check,
                              default_radius_bounds, init_seeds, load_checkpoint, run, sample_positions)
from foamopt.sensitivity import FoamSettings, FoamState


def test_ch_warmup_and_window():
    hist = [(10.0, 0.3)] * 4 + [(12.0, 0.3)]
    assert convergence_check(hist, 3, v=0.3) == 1.0
    assert convergence_check(hist, 4, v=0.3) == 1.0
    hist = [(5.0, 0.3)] + hist
    assert convergence_check(hist, 5, v=0.3) == pytest.approx(abs(12 - 10.4) / 10.4, abs=1e-4)
    const = [(7.0, 0.29)] * 8
    assert convergence_check(const, 7, v=0.3) == 0.0


def test_ch_frozen_while_infeasible():
    hist = [(10.0, 0.3)] * 6 + [(9.0, 0.31)]
    assert convergence_check(hist, 6, v=0.3, previous=0.25) == 0.25
    # V_er exactly at the tolerance is feasible
    hist[-1] = (9.0, 0.3 * (1 + 1e-4))
    assert convergence_check(hist, 6, v=0.3, previous=0.25) != 0.25


def test_ch_from_trace():
    tr = OptTrace(0.3)
    for k, J in enumerate([5, 4, 3, 10, 10, 10, 10, 12]):
        tr.append(IterRecord(k, 1.0, 1.0, float(J), 0.3, 1.0, 0.0))
        tr.records[-1].ch = convergence_check(tr, k)
    assert tr.records[3].ch == 1.0
    assert tr.records[-1].ch == pytest.approx(0.1538, abs=1e-4)


def test_problem_validation():
    with pytest.raises(ValueError):
        OptProblem([0, 0], [1, 1], 0.1, 0.05)
    with pytest.raises(ValueError):
        OptProblem([0, 0], [1, 1], 0.01, 0.05, v=0.0)
    with pytest.raises(ValueError):
        OptProblem([0, 0], [1, 1], 0.01, 0.05, w=1.5)


def test_unit_roundtrip():
    p = OptProblem([0, -1], [2, 1], 0.01, 0.05)
    seeds = init_seeds(Box([0, -1], [2, 1]), 7, 0, r_lo=0.02)
    z = p.to_unit(seeds)
    back = p.from_unit(z)
    assert np.allclose(back.positions, seeds.positions) and np.allclose(back.radii, seeds.radii)


def test_init_determinism_and_domain():
    dom = Sphere([0.0, 0.0], 1.0)
    a = init_seeds(dom, 50, rng_seed=3)
    b = init_seeds(dom, 50, rng_seed=3)
    assert np.array_equal(a.positions, b.positions)
    assert np.all(dom(a.positions) >= 0)
    c = sample_positions(dom, 40, np.random.default_rng(1), "blue_noise")
    assert len(c) == 40 and np.all(dom(c) >= 0)
    with pytest.raises(ValueError):
        sample_positions(dom, 5, np.random.default_rng(1), "grid")


def test_init_meets_volume_target():
    dom = Box([0, 0], [1, 1])
    fine = build_structured(dom, 4, 10).fine
    s = FoamSettings(fine, dom)
    r_lo, r_hi = default_radius_bounds(s, 20, 0.5)
    seeds = init_seeds(dom, 20, 0, v=0.3, settings=s, r_lo=r_lo, r_hi=r_hi)
    Vf = volume(FoamState(s, seeds).density, fine)[1]
    assert abs(Vf - 0.3) <= 0.01 * 0.3


def _small_problem(max_iter, w=0.1):
    dom = Box([0, 0], [2, 1])
    cm = build_structured(dom, (4, 2), 6)
    lc = loadcase_from_spec({"supports": [{"box": [[0, 0], [0, 1]], "axes": [0, 1]}],
                             "forces": [{"box": [[2, 0.4], [2, 0.6]], "vector": [0, -1]}]}, cm.fine)
    s = FoamSettings(cm.fine, dom)
    r_lo, r_hi = default_radius_bounds(s, 12, 0.5)
    seeds = init_seeds(dom, 12, 0, v=0.4, settings=s, r_lo=r_lo, r_hi=r_hi)
    prob = OptProblem(*dom.bbox, r_lo, r_hi, w=w, v=0.4, max_iter=max_iter)
    return prob, Evaluator(s, lc, "coarse", cm), seeds


def test_zero_iteration_run_returns_initial_design():
    prob, ev, seeds = _small_problem(0)
    res = run(prob, ev, seeds)
    assert res.iterations == 0 and not res.converged
    assert np.array_equal(res.seeds.positions, seeds.positions)
    assert np.allclose(res.seeds.radii, seeds.radii)
    assert len(res.trace) == 1


def test_short_run_improves_and_checkpoints(tmp_path):
    prob, ev, seeds = _small_problem(4)
    ck = tmp_path / "ck.json"
    res = run(prob, ev, seeds, checkpoint=ck, rng=np.random.default_rng(0))
    J = res.trace.J
    assert J[-1] < J[0]
    data = load_checkpoint(ck)
    assert data["iteration"] == res.iterations and len(data["trace"]) == len(res.trace)
    # resuming from the checkpoint continues the trace
    prob.max_iter = res.iterations + 1
    res2 = run(prob, ev, seeds, resume=str(ck), rng=np.random.default_rng(0))
    assert len(res2.trace) == len(res.trace) + 1
    assert res2.trace.records[0].J == res.trace.records[0].J


def test_trace_exports(tmp_path):
    tr = OptTrace(0.3)
    for k in range(3):
        tr.append(IterRecord(k, 1.0 - k * 0.1, 0.5, 1.0 - k * 0.1, 0.3, 1.0, 0.1 * k))
    tr.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,C,S,J") and len(lines) == 4
    assert len(tr.sparkline()) == 3
