import numpy as np
import pytest

from foamopt.domain import Box
from foamopt.implicit import volume
from foamopt.mesh import build_structured
from foamopt.sensitivity import (DensitySlice, FoamSettings, FoamState, all_slices, compliance_gradient,
                                 density_derivative, differentiability_guard, shape_energy_and_gradient,
                                 volume_gradient)
from foamopt.voronoi import SeedSet


def _setup(dim=2, n=9, res=4, refine=10, faces=False, seed=0, bounds=None):
    dom = Box(np.zeros(dim), np.ones(dim))
    fine = build_structured(dom, res, refine).fine
    s = FoamSettings(fine, dom, boundary_faces=faces)
    rng = np.random.default_rng(seed)
    lo, hi = (np.zeros(dim), np.ones(dim)) if bounds is None else bounds
    X = rng.uniform(0.1, 0.9, (n, dim))
    seeds = SeedSet(X, rng.uniform(2, 3, n) * fine.l_a, lo, hi)
    return s, seeds


def _global_dH(s, seeds, var, h):
    i, c = var
    out = []
    for sgn in (1, -1):
        X, r = seeds.positions.copy(), seeds.radii.copy()
        if c < seeds.dim:
            X[i, c] += sgn * h
        else:
            r[i] += sgn * h
        out.append(FoamState(s, seeds.replace(positions=X, radii=r)).density.node_H)
    return (out[0] - out[1]) / (2 * h)


def _dense(sl, n):
    out = np.zeros(n)
    out[sl.nodes] = sl.dH
    return out


@pytest.mark.parametrize("var", [(0, 0), (3, 1), (5, 2)])
def test_slice_matches_global_recomputation_2d(var):
    s, seeds = _setup()
    st = FoamState(s, seeds)
    sl = density_derivative(st, var)
    ref = _global_dH(s, seeds, var, s.step)
    assert np.max(np.abs(_dense(sl, len(ref)) - ref)) <= 1e-6


@pytest.mark.parametrize("var", [(1, 0), (4, 2), (2, 3)])
def test_slice_matches_global_recomputation_3d(var):
    s, seeds = _setup(dim=3, n=12, res=2, refine=7, faces=True, seed=1)
    st = FoamState(s, seeds)
    sl = density_derivative(st, var)
    ref = _global_dH(s, seeds, var, s.step)
    assert np.max(np.abs(_dense(sl, len(ref)) - ref)) <= 1e-6


def test_radius_derivative_nonnegative():
    s, seeds = _setup(seed=2)
    st = FoamState(s, seeds)
    for i in range(len(seeds)):
        assert np.all(density_derivative(st, (i, 2)).dH >= 0)


def test_far_exterior_seed_has_empty_slice():
    bounds = (np.array([-4.0, -4.0]), np.array([5.0, 5.0]))
    s, seeds = _setup(n=9, bounds=bounds)
    # a ring of outer seeds keeps the far seed out of the 2-ring of every cell meeting Ω
    t = np.arange(16) * 2 * np.pi / 16
    ring = 0.5 + 2.5 * np.column_stack([np.cos(t), np.sin(t)])
    X = np.vstack([seeds.positions, ring, [[4.2, 4.4]]])
    r = np.full(len(X), seeds.radii[0])
    seeds = SeedSet(X, r, *bounds)
    st = FoamState(s, seeds)
    far = len(X) - 1
    for c in range(3):
        assert len(density_derivative(st, (far, c)).nodes) == 0


def test_gradient_formulas_simple_cases():
    s, seeds = _setup()
    n_el = len(s.fine.elements)
    energies = np.ones(n_el)
    empty = DensitySlice(np.zeros(0, int), np.zeros(0))
    assert compliance_gradient([empty], energies, s)[0] == 0.0
    assert volume_gradient([empty], s)[0] == 0.0
    # uniform nodal increase c raises every element by c
    c = 0.3
    uniform = DensitySlice(np.arange(len(s.fine.nodes)), np.full(len(s.fine.nodes), c))
    assert np.allclose(uniform.element_values(s), c)
    g = compliance_gradient([uniform], energies, s)[0]
    assert g == pytest.approx(-0.5 * c * energies.sum()) and g < 0


def test_volume_gradient_vs_recompute():
    s, seeds = _setup(seed=3)
    st = FoamState(s, seeds)
    h = s.step
    for var in [(0, 0), (2, 1), (4, 2), (7, 2)]:
        dV = volume_gradient([density_derivative(st, var)], s)[0]
        vals = []
        for sgn in (1, -1):
            X, r = seeds.positions.copy(), seeds.radii.copy()
            if var[1] < 2:
                X[var] += sgn * h
            else:
                r[var[0]] += sgn * h
            vals.append(volume(FoamState(s, seeds.replace(positions=X, radii=r)).density, s.fine)[0])
        fd = (vals[0] - vals[1]) / (2 * h)
        assert dV == pytest.approx(fd, rel=1e-2, abs=1e-12)
    for i in range(len(seeds)):
        assert volume_gradient([density_derivative(st, (i, 2))], s)[0] >= 0


def test_guard_cases():
    l_a = 0.01
    t = np.array([0.1, 1.3, 2.9, 4.4])
    circle = np.column_stack([np.cos(t), np.sin(t)])
    assert differentiability_guard([0.0, 0.0], circle, l_a)
    rng = np.random.default_rng(0)
    S = rng.uniform(0, 1, (8, 2))
    x0 = rng.uniform(0.3, 0.7, 2)
    d = np.sort(np.linalg.norm(S - x0, axis=1))
    assert d[1] - d[0] > 1e-3 * l_a
    assert not differentiability_guard(x0, S, l_a)
    # on the bisector of the two nearest seeds
    two = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 3.0], [-2.0, -2.5]])
    assert differentiability_guard([0.5, -0.2], two, l_a)


def test_guard_flags_forward_differences():
    s, seeds = _setup()
    st = FoamState(s, seeds)
    sl = density_derivative(st, (0, 0), flagged=True)
    assert sl.flagged
    slices = all_slices(st)
    assert len(slices) == 3 * len(seeds)


def test_shape_energy_at_centroids_is_zero():
    X = np.array([[0.25, 0.5], [0.75, 0.5]])
    seeds = SeedSet(X, [0.1, 0.1], [0, 0], [1, 1])
    st_graph = FoamState(_setup()[0], seeds).raw
    S, g = shape_energy_and_gradient(seeds, st_graph, Box([0, 0], [1, 1]))
    assert S == pytest.approx(0.0, abs=1e-20) and np.allclose(g, 0.0)


def test_shape_descent_is_monotone():
    from foamopt.voronoi import tessellate
    rng = np.random.default_rng(4)
    dom = Box([0, 0], [1, 1])
    X = rng.uniform(0, 1, (30, 2))
    prev = np.inf
    for _ in range(20):
        seeds = SeedSet(X, np.full(30, 0.01), [0, 0], [1, 1])
        S, g = shape_energy_and_gradient(seeds, tessellate(seeds), dom, exact=False)
        assert S <= prev
        prev = S
        X = np.clip(X - 0.5 * g, 0, 1)       # half a Lloyd step
