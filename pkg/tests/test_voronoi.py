import numpy as np
import pytest
from scipy.spatial import cKDTree

from foamopt.domain import Box, Sphere
from foamopt.kernels import beam_union
from foamopt.voronoi import (DuplicateSeedError, SeedSet, VoronoiGraph, beam_radius, cell_centroids, clip,
                             local_reconstruct, tessellate, three_point_beam, two_ring_seeds)


def seeds_in(n, d, rng, r=0.01):
    return SeedSet(rng.uniform(0, 1, (n, d)), np.full(n, r), np.zeros(d), np.ones(d))


def test_seedset_validation():
    with pytest.raises(ValueError):
        SeedSet(np.zeros((2, 2)), [0.1], [0, 0], [1, 1])
    with pytest.raises(ValueError):
        SeedSet([[0.5, 0.5]], [-0.1], [0, 0], [1, 1])
    with pytest.raises(ValueError):
        SeedSet([[1.5, 0.5]], [0.1], [0, 0], [1, 1])


def test_two_seed_bisector():
    s = SeedSet([[0.0, 0.0], [1.0, 0.0]], [0.1, 0.1], [-1, -1], [2, 2])
    g = tessellate(s, (np.array([-10.0, -10]), np.array([11.0, 11])))
    assert len(g) == 1
    assert np.allclose(g.p0[0, 0], 0.5) and np.allclose(g.p1[0, 0], 0.5)


def test_single_seed_has_no_edges():
    s = SeedSet([[0.5, 0.5]], [0.1], [0, 0], [1, 1])
    assert len(tessellate(s)) == 0


def test_duplicates_rejected():
    with pytest.raises(DuplicateSeedError):
        tessellate(SeedSet([[0.5, 0.5], [0.5, 0.5]], [0.1, 0.1], [0, 0], [1, 1]))


@pytest.mark.parametrize("d", [2, 3])
def test_edges_equidistant_brute_force(d):
    rng = np.random.default_rng(d)
    s = seeds_in(50, d, rng)
    g = tessellate(s)
    tree = cKDTree(s.positions)
    t = np.linspace(0, 1, 100)[:, None]
    diag = np.linalg.norm(g.sites.max(0) - g.sites.min(0)) * 5
    for e in range(len(g)):
        pts = g.p0[e] + t * (g.p1[e] - g.p0[e])
        dist, _ = tree.query(pts)
        adj = g.adjacent[e]
        da = np.linalg.norm(pts[:, None, :] - s.positions[adj][None], axis=2)
        assert np.all(np.abs(da - dist[:, None]) <= 1e-9 * diag)
        assert len(set(adj)) == d


def test_clip_sphere_cases():
    dom = Sphere([0.0, 0.0], 1.0)
    inside = VoronoiGraph(np.array([[0.0, 0.0], [0.5, 0.0], [2.0, 0.0], [3.0, 0.0]]),
                          np.array([[0, 1], [2, 3], [0, 2]]), np.array([[0, 1], [0, 1], [0, 1]]),
                          np.full(3, 0.1), np.zeros(4, bool), [set(), set()], np.zeros((2, 2)))
    c = clip(inside, dom, l_a=0.01)
    assert len(c) == 2
    assert np.allclose(c.p1[0], [0.5, 0.0])
    trimmed = c.p1[1] if c.p0[1, 0] == 0 else c.p0[1]
    assert abs(np.linalg.norm(trimmed) - 1.0) <= 1e-3 * 0.01


def test_beam_radius_means():
    r = np.array([0.1, 0.2, 0.3])
    assert beam_radius([0, 1, 2], r) == pytest.approx(0.2)
    assert beam_radius([0, 2], r) == pytest.approx(0.2)
    assert beam_radius([1, 1], np.full(3, 0.1)) == pytest.approx(0.1)


def test_two_ring_small_set_and_locality():
    rng = np.random.default_rng(1)
    s = seeds_in(3, 2, rng)
    assert set(two_ring_seeds([0.5, 0.5], s, 3)) == {0, 1, 2}
    # a far cluster is excluded and does not change Φ at x0
    near = rng.uniform(0, 0.3, (40, 2))
    far = rng.uniform(0.8, 1.0, (10, 2))
    s = SeedSet(np.vstack([near, far]), np.full(50, 0.01), [0, 0], [1, 1])
    x0 = np.array([0.15, 0.15])
    ids = two_ring_seeds(x0, s, 16)
    assert np.all(ids < 40)
    g = tessellate(s)
    b = local_reconstruct(x0, s, 16, p=16, scale=0.01)
    ref = beam_union(x0[None], g.p0, g.p1, g.rbar, 16, 0.01)[0]
    got = beam_union(x0[None], b.p0, b.p1, b.rbar, 16, 0.01)[0]
    assert got == pytest.approx(ref, abs=1e-12)
    # moving a far seed by 0.1 l_a leaves Φ(x0) unchanged
    X = s.positions.copy()
    X[45] += 0.001
    g2 = tessellate(s.replace(positions=X))
    assert beam_union(x0[None], g2.p0, g2.p1, g2.rbar, 16, 0.01)[0] == ref


def test_local_reconstruct_full_set_is_global():
    rng = np.random.default_rng(2)
    s = seeds_in(20, 2, rng)
    g = tessellate(s)
    b = local_reconstruct([0.5, 0.5], s, k=20)
    assert len(b.rbar) == len(g)


def test_local_reconstruct_matches_global_3d():
    rng = np.random.default_rng(5)
    s = seeds_in(300, 3, rng, r=0.02)
    g = tessellate(s)
    for x0 in rng.uniform(0.1, 0.9, (20, 3)):
        b = local_reconstruct(x0, s, 32, p=16, scale=0.02)
        ref = beam_union(x0[None], g.p0, g.p1, g.rbar, 16, 0.02)[0]
        got = beam_union(x0[None], b.p0, b.p1, b.rbar, 16, 0.02)[0]
        assert abs(got - ref) <= 1e-9


def test_local_reconstruct_lattice_symmetry():
    ax = (np.arange(6) + 0.5) / 6
    X = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    s = SeedSet(X, np.full(len(X), 0.02), [0, 0], [1, 1])
    c = np.array([0.5, 0.5]) + np.array([1, 1]) / 12
    vals = []
    for off in ([0.03, 0], [0, 0.03], [-0.03, 0], [0, -0.03]):
        x0 = c + off
        b = local_reconstruct(x0, s, 16, p=16, scale=0.02)
        vals.append(beam_union(x0[None], b.p0, b.p1, b.rbar, 16, 0.02)[0])
    assert np.ptp(vals) <= 1e-12


def test_three_point_simple_cases():
    h = np.sqrt(3) / 2
    tri = np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0]])
    s = SeedSet(np.vstack([tri, [[0.5, 0.3, 5.0]]]), np.full(4, 0.1), [-1, -1, -1], [6, 6, 6])
    cc = np.array([0.5, h / 3, 0.0])
    _, _, rbar, dist = three_point_beam(cc + [0, 0, 0.2], s)
    assert dist == pytest.approx(0.0, abs=1e-12)
    s2 = SeedSet([[0, 0], [2, 0]], [0.1, 0.1], [-1, -1], [3, 3])
    point, direction, _, dist = three_point_beam([1, 1], s2)
    assert dist == pytest.approx(0.0, abs=1e-12)
    assert point[0] == pytest.approx(1.0)


def test_centroids_simple():
    dom = Box([0, 0], [1, 1])
    s = SeedSet([[0.3, 0.6]], [0.1], [0, 0], [1, 1])
    c = cell_centroids(tessellate(s), dom)
    assert np.allclose(c[0], [0.5, 0.5])
    s = SeedSet([[0.3, 0.4], [0.7, 0.4]], [0.1, 0.1], [0, 0], [1, 1])
    c = cell_centroids(tessellate(s), dom)
    assert np.allclose([1 - c[0][0], c[0][1]], c[1])


def test_centroids_monte_carlo():
    rng = np.random.default_rng(7)
    dom = Box([0, 0], [1, 1])
    s = seeds_in(20, 2, rng)
    c = np.array(cell_centroids(tessellate(s), dom))
    y = rng.uniform(0, 1, (1_000_000, 2))
    owner = cKDTree(s.positions).query(y)[1]
    mc = np.array([y[owner == i].mean(axis=0) for i in range(20)])
    l_a = 0.02
    assert np.max(np.linalg.norm(c - mc, axis=1)) <= 1e-2 * l_a * 10
